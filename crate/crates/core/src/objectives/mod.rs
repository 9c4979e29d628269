//! Training objectives and separation metrics.

mod losses;
mod metrics;

pub use losses::{
    ce_weights, hierarchical_loss, hierarchical_term, ibm_bin_major, loss_ce, loss_psa, loss_wa, mask_to_bin_major,
    psa_targets, HeadTargets, LossConfig, LossKind,
};
pub use metrics::{
    si_sdr, si_sdr_slices, si_sir_sar, si_sir_sar_slices, ClassMetrics, MetricAverages, MetricReport, METRIC_CAP_DB,
};
