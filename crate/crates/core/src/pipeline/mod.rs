//! End-to-end runs: training, evaluation reports and UI bundle export.

mod config;
mod evaluate;
mod export;
mod train;

pub use config::RunConfig;
pub use evaluate::{
    certainty_compare, default_grid, evaluate_report, oracle_psf_estimates, separate, threshold_sweep,
    CertaintyComparison, EvaluationReport, GridPoint, Separation, SweepPoint, ThresholdSweep, TrackCorrelation,
    TrackReport,
};
pub use export::{
    export_bundle, theta_label, BundleClass, BundleManifest, ExportOptions, MapDescriptor, ThetaMetrics,
    BUNDLE_FORMAT_VERSION, REGION_GRID,
};
pub use train::{
    chunk_samples, example_loss, mean_loss, train, validation_examples, EpochRecord, Example, Optimizer, TrainOutcome,
    TrainingLog,
};

use crate::data::Track;
use crate::dsp::DspConfig;
use crate::error::Result;
use crate::model::HierarchySpec;

/// Trains and evaluates one model per `(curvature, embedding_dim)` pair.
#[allow(clippy::too_many_arguments)]
pub fn curvature_dim_grid(
    base: &RunConfig,
    pairs: &[(f64, usize)],
    hierarchy: &HierarchySpec,
    dsp: DspConfig,
    train_tracks: &[Track],
    val_tracks: &[Track],
    test_tracks: &[Track],
    mut progress: impl FnMut(&GridPoint),
) -> Result<Vec<GridPoint>> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(c, l) in pairs {
        let cfg = RunConfig {
            curvature: c,
            embedding_dim: l,
            ..base.clone()
        };
        let trained = train(&cfg, hierarchy, dsp, train_tracks, val_tracks, |_| {})?;
        let report = evaluate_report(&trained.model, test_tracks)?;
        let point = GridPoint {
            curvature: c,
            embedding_dim: l,
            best_val_loss: trained.log.best_val_loss,
            averages: report.model.averages,
        };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
