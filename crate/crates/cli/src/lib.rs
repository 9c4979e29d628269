//! Command-line front end: dataset generation, training, evaluation,
//! bundle export and the read-only bundle server.

pub mod commands;
pub mod serve;
pub mod table;

use hypsep::{Error, ErrorCategory};

/// Process exit code of a failed command: 2 config, 3 data, 4 numeric,
/// 5 I/O, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
                ErrorCategory::Io => 5,
            };
        }
        if cause.is::<std::io::Error>() {
            return 5;
        }
    }
    1
}
