use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::HierarchySpec;

/// Reported metrics are clamped to this magnitude in dB.
pub const METRIC_CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(num/den)` clamped to ±100 dB, with the limits for zero terms.
fn capped_ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { METRIC_CAP_DB } else { -METRIC_CAP_DB };
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(&est.samples, &reference.samples)
}

pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let rr = dot(reference, reference);
    if rr <= 0.0 {
        return Err(Error::InvalidArgument("SI-SDR reference is all zero".into()));
    }
    let alpha = dot(est, reference) / rr;
    let mut target = 0.0;
    let mut err = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        err += (t - e) * (t - e);
    }
    Ok(capped_ratio_db(target, err))
}

/// Scale-invariant SIR and SAR of `est` against the reference set, with
/// `refs[target]` as the wanted source.
pub fn si_sir_sar(est: &Waveform, refs: &[Waveform], target: usize) -> Result<(f64, f64)> {
    let slices: Vec<&[f64]> = refs.iter().map(|r| r.samples.as_slice()).collect();
    si_sir_sar_slices(&est.samples, &slices, target)
}

pub fn si_sir_sar_slices(est: &[f64], refs: &[&[f64]], target: usize) -> Result<(f64, f64)> {
    if target >= refs.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of {} references",
            refs.len()
        )));
    }
    for r in refs {
        check_pair(est, r)?;
    }
    let k = refs.len();
    let gram = DMatrix::from_fn(k, k, |i, j| dot(refs[i], refs[j]));
    let rhs = DVector::from_fn(k, |i, _| dot(refs[i], est));
    let max_diag = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let degenerate = || Error::InvalidArgument("reference signals are linearly dependent".into());
    if max_diag <= 0.0 {
        return Err(degenerate());
    }
    let chol = gram.clone().cholesky().ok_or_else(degenerate)?;
    let l = chol.l();
    let min_pivot = (0..k).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-12 * max_diag {
        return Err(degenerate());
    }
    let coef = chol.solve(&rhs);

    let rt = refs[target];
    let tt = gram[(target, target)];
    let scale = dot(est, rt) / tt;
    let (mut e_target, mut e_interf, mut e_span, mut e_artif) = (0.0, 0.0, 0.0, 0.0);
    for n in 0..est.len() {
        let span: f64 = (0..k).map(|j| coef[j] * refs[j][n]).sum();
        let tgt = scale * rt[n];
        let interf = span - tgt;
        let artif = est[n] - span;
        e_target += tgt * tgt;
        e_interf += interf * interf;
        e_span += span * span;
        e_artif += artif * artif;
    }
    Ok((capped_ratio_db(e_target, e_interf), capped_ratio_db(e_span, e_artif)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub si_sdr: f64,
    pub si_sir: f64,
    pub si_sar: f64,
}

impl ClassMetrics {
    pub fn compute(est: &Waveform, refs: &[Waveform], target: usize) -> Result<Self> {
        let si_sdr = si_sdr(est, &refs[target])?;
        let (si_sir, si_sar) = si_sir_sar(est, refs, target)?;
        Ok(Self { si_sdr, si_sir, si_sar })
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ClassMetrics>) -> Self {
        let mut acc = ClassMetrics::default();
        let mut n = 0usize;
        for m in items {
            acc.si_sdr += m.si_sdr;
            acc.si_sir += m.si_sir;
            acc.si_sar += m.si_sar;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            acc.si_sdr /= k;
            acc.si_sir /= k;
            acc.si_sar /= k;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAverages {
    pub parents: ClassMetrics,
    pub leaves: ClassMetrics,
    pub all: ClassMetrics,
}

/// Per-class scale-invariant metrics with group averages.
///
/// JSON layout: `{"classes": {name: {"si_sdr", "si_sir", "si_sar"}},
/// "averages": {"parents", "leaves", "all"}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: BTreeMap<String, ClassMetrics>,
    pub averages: MetricAverages,
}

impl MetricReport {
    /// Scores parent and leaf estimates against their references. SIR/SAR use
    /// the references of the same level as the interference set.
    pub fn evaluate(
        hierarchy: &HierarchySpec,
        parent_est: &[Waveform],
        leaf_est: &[Waveform],
        parent_refs: &[Waveform],
        leaf_refs: &[Waveform],
    ) -> Result<Self> {
        let (kp, kl) = (hierarchy.parents.len(), hierarchy.leaves.len());
        if parent_est.len() != kp || parent_refs.len() != kp || leaf_est.len() != kl || leaf_refs.len() != kl {
            return Err(Error::Shape("estimates do not match the hierarchy".into()));
        }
        let mut classes = BTreeMap::new();
        for (k, name) in hierarchy.parents.iter().enumerate() {
            classes.insert(name.clone(), ClassMetrics::compute(&parent_est[k], parent_refs, k)?);
        }
        for (k, name) in hierarchy.leaves.iter().enumerate() {
            classes.insert(name.clone(), ClassMetrics::compute(&leaf_est[k], leaf_refs, k)?);
        }
        Ok(Self::with_averages(hierarchy, classes))
    }

    fn with_averages(hierarchy: &HierarchySpec, classes: BTreeMap<String, ClassMetrics>) -> Self {
        let pick = |names: &[String]| ClassMetrics::mean(names.iter().filter_map(|n| classes.get(n)));
        let averages = MetricAverages {
            parents: pick(&hierarchy.parents),
            leaves: pick(&hierarchy.leaves),
            all: ClassMetrics::mean(classes.values()),
        };
        Self { classes, averages }
    }

    /// Class-wise mean over several reports (e.g. one per track).
    pub fn mean(hierarchy: &HierarchySpec, reports: &[MetricReport]) -> Self {
        let mut classes = BTreeMap::new();
        for name in hierarchy.class_names() {
            let m = ClassMetrics::mean(reports.iter().filter_map(|r| r.classes.get(&name)));
            classes.insert(name, m);
        }
        Self::with_averages(hierarchy, classes)
    }
}
