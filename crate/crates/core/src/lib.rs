//! Hyperbolic audio source separation.

pub mod autodiff;
pub mod certainty;
pub mod data;
pub mod dsp;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;

pub use error::{Error, ErrorCategory, Result};
