//! Certainty maps from embedding geometry and from Monte-Carlo dropout.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dsp::{ComplexSpectrogram, MaskTensor};
use crate::error::{Error, Result};
use crate::geometry::{kernels, MlrMode};
use crate::model::{Dropout, ModelConfig, SeparationModel};

/// Dropout rate used for Monte-Carlo certainty estimation.
pub const MC_DROPOUT_RATE: f64 = 0.5;
pub const MC_PASSES: usize = 1000;
/// Passes per independent batch when estimating the spread of ζ.
pub const MC_BATCH: usize = 100;
/// Number of histogram bins over the normalized norm range `[0, 1]`.
pub const NORM_HIST_BINS: usize = 20;
/// Active-source-count buckets `0, 1, 2, 3, 4+`.
pub const COUNT_BUCKETS: usize = 5;

/// Certainty thresholds `0, 0.05, ..., 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertaintyKind {
    /// `√c·‖z‖`, in `[0, 1)`.
    HyperbolicNorm,
    /// `d_c(0, z)`.
    HyperbolicDistance,
    /// Negative predictive entropy of the mean leaf softmax.
    BayesianEntropy,
}

impl CertaintyKind {
    pub fn is_hyperbolic(self) -> bool {
        !matches!(self, CertaintyKind::BayesianEntropy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CertaintyKind::HyperbolicNorm => "hyperbolic-norm",
            CertaintyKind::HyperbolicDistance => "hyperbolic-distance",
            CertaintyKind::BayesianEntropy => "bayesian-entropy",
        }
    }
}

/// Frame-major `T x F` certainty values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyMap {
    pub kind: CertaintyKind,
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl CertaintyMap {
    pub fn new(kind: CertaintyKind, frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::Shape(format!(
                "certainty map of {} values for {frames}x{bins}",
                values.len()
            )));
        }
        Ok(Self {
            kind,
            frames,
            bins,
            values,
        })
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn check_embeddings(z: &Tensor, frames: usize, bins: usize) -> Result<()> {
    if z.rows() != frames * bins {
        return Err(Error::Shape(format!(
            "{} embedding rows for {frames}x{bins} bins",
            z.rows()
        )));
    }
    Ok(())
}

/// Certainty map of bin-major `(T·F) x L` ball embeddings.
pub fn hyperbolic_certainty_map(
    z: &Tensor,
    frames: usize,
    bins: usize,
    config: &ModelConfig,
    kind: CertaintyKind,
) -> Result<CertaintyMap> {
    if config.mode != MlrMode::Hyperbolic {
        return Err(Error::InvalidArgument(
            "certainty maps need hyperbolic embeddings".into(),
        ));
    }
    if !kind.is_hyperbolic() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a hyperbolic kind",
            kind.as_str()
        )));
    }
    check_embeddings(z, frames, bins)?;
    let c = config.curvature;
    let sc = c.sqrt();
    let values = (0..z.rows())
        .map(|i| {
            let n = kernels::norm_sq(z.row(i)).sqrt();
            match kind {
                CertaintyKind::HyperbolicNorm => sc * n,
                _ => kernels::origin_distance(n, c),
            }
        })
        .collect();
    CertaintyMap::new(kind, frames, bins, values)
}

/// Silences, in every class, the bins whose normalized norm is below `theta`.
pub fn threshold_masks(masks: &MaskTensor, cert: &CertaintyMap, theta: f64) -> Result<MaskTensor> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("threshold {theta} outside [0, 1)")));
    }
    if cert.kind != CertaintyKind::HyperbolicNorm {
        return Err(Error::InvalidArgument(format!(
            "thresholding needs a hyperbolic-norm map, got {}",
            cert.kind.as_str()
        )));
    }
    if cert.frames != masks.frames || cert.bins != masks.bins {
        return Err(Error::Shape("certainty map and masks differ in shape".into()));
    }
    let mut out = masks.clone();
    for k in 0..masks.classes {
        for (m, v) in out.class_mut(k).iter_mut().zip(&cert.values) {
            if *v < theta {
                *m = 0.0;
            }
        }
    }
    Ok(out)
}

/// `Σ_k p_k ln p_k` of each row of a bin-major `(T·F) x K` probability table.
fn neg_entropy(probs: &[f64], classes: usize) -> Vec<f64> {
    probs
        .chunks(classes)
        .map(|row| row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum())
        .collect()
}

/// Bayesian certainty with the spread of ζ across independent batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianCertainty {
    pub map: CertaintyMap,
    /// Mean over bins of the standard error of ζ computed from disjoint
    /// batches of [`MC_BATCH`] passes; `None` with fewer than two batches.
    pub batch_std_error: Option<f64>,
}

fn pass_seed(seed: u64, pass: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass as u64);
    rng.next_u64()
}

/// Sum of leaf softmax tables over `passes`, in pass order.
fn leaf_softmax_sum(
    model: &SeparationModel,
    x: &ComplexSpectrogram,
    passes: std::ops::Range<usize>,
    rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for pass in passes {
        let dropout = (rate > 0.0).then(|| Dropout {
            rate,
            after_last: true,
            seed: pass_seed(seed, pass),
        });
        let (g, nodes) = model.run(x, dropout)?;
        let p = g.value(nodes.leaf_masks).expect("evaluated").data();
        match acc.as_mut() {
            None => acc = Some(p.to_vec()),
            Some(a) => a.iter_mut().zip(p).for_each(|(a, v)| *a += v),
        }
    }
    Ok(acc.unwrap_or_default())
}

/// Negative predictive entropy of the mean leaf softmax over `n_passes`
/// stochastic forward passes with dropout after every recurrent layer.
pub fn bayesian_certainty(
    model: &SeparationModel,
    x: &ComplexSpectrogram,
    n_passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<BayesianCertainty> {
    if n_passes < 1 {
        return Err(Error::InvalidArgument("at least one pass is required".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {dropout_rate} outside [0, 1)"
        )));
    }
    let k = model.hierarchy.leaves.len();
    let batches: Vec<std::ops::Range<usize>> = (0..n_passes)
        .step_by(MC_BATCH)
        .map(|s| s..(s + MC_BATCH).min(n_passes))
        .collect();
    let sums = batches
        .par_iter()
        .map(|r| leaf_softmax_sum(model, x, r.clone(), dropout_rate, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut total = vec![0.0; sums[0].len()];
    for s in &sums {
        total.iter_mut().zip(s).for_each(|(t, v)| *t += v);
    }
    let inv = 1.0 / n_passes as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    let map = CertaintyMap::new(CertaintyKind::BayesianEntropy, x.frames, x.bins, neg_entropy(&total, k))?;

    let full: Vec<(usize, &Vec<f64>)> = batches
        .iter()
        .zip(&sums)
        .filter(|(r, _)| r.len() == MC_BATCH)
        .map(|(r, s)| (r.len(), s))
        .collect();
    let batch_std_error = (full.len() >= 2).then(|| {
        let zetas: Vec<Vec<f64>> = full
            .iter()
            .map(|(n, s)| {
                let mean: Vec<f64> = s.iter().map(|v| v / *n as f64).collect();
                neg_entropy(&mean, k)
            })
            .collect();
        let b = zetas.len() as f64;
        let bins = zetas[0].len();
        let mut acc = 0.0;
        for i in 0..bins {
            let m = zetas.iter().map(|z| z[i]).sum::<f64>() / b;
            let var = zetas.iter().map(|z| (z[i] - m).powi(2)).sum::<f64>() / (b - 1.0);
            acc += (var / b).sqrt();
        }
        acc / bins as f64
    });
    Ok(BayesianCertainty { map, batch_std_error })
}

/// Pearson correlation over all bins of two equally shaped maps.
pub fn pearson_correlation(a: &CertaintyMap, b: &CertaintyMap) -> Result<f64> {
    if a.frames != b.frames || a.bins != b.bins {
        return Err(Error::Shape("certainty maps differ in shape".into()));
    }
    let n = a.values.len() as f64;
    let ma = a.values.iter().sum::<f64>() / n;
    let mb = b.values.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::InvalidArgument(
            "correlation of a constant map is undefined".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistogram {
    /// `"0"`, `"1"`, `"2"`, `"3"` or `"4+"`.
    pub label: String,
    pub counts: Vec<u64>,
    pub population: u64,
    /// Mean normalized norm of the bucket; `None` when empty.
    pub mean: Option<f64>,
}

/// Histograms of normalized embedding norms grouped by active-source count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistogramSet {
    /// `NORM_HIST_BINS + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub buckets: Vec<NormHistogram>,
}

impl NormHistogramSet {
    pub fn empty() -> Self {
        let edges = (0..=NORM_HIST_BINS).map(|i| i as f64 / NORM_HIST_BINS as f64).collect();
        let buckets = (0..COUNT_BUCKETS)
            .map(|b| NormHistogram {
                label: if b + 1 == COUNT_BUCKETS {
                    format!("{b}+")
                } else {
                    b.to_string()
                },
                counts: vec![0; NORM_HIST_BINS],
                population: 0,
                mean: None,
            })
            .collect();
        Self { edges, buckets }
    }

    /// Adds every bin of a normalized-norm map under its count bucket.
    pub fn accumulate(&mut self, norms: &CertaintyMap, counts: &[u8]) -> Result<()> {
        if norms.kind != CertaintyKind::HyperbolicNorm {
            return Err(Error::InvalidArgument("histograms need a hyperbolic-norm map".into()));
        }
        if counts.len() != norms.values.len() {
            return Err(Error::Shape(format!(
                "{} source counts for {} bins",
                counts.len(),
                norms.values.len()
            )));
        }
        for (v, c) in norms.values.iter().zip(counts) {
            let b = (*c as usize).min(COUNT_BUCKETS - 1);
            let h = &mut self.buckets[b];
            let idx = ((v * NORM_HIST_BINS as f64) as usize).min(NORM_HIST_BINS - 1);
            h.counts[idx] += 1;
            let prev = h.mean.unwrap_or(0.0) * h.population as f64;
            h.population += 1;
            h.mean = Some((prev + v) / h.population as f64);
        }
        Ok(())
    }

    pub fn population(&self) -> u64 {
        self.buckets.iter().map(|b| b.population).sum()
    }
}

/// Histograms of one normalized-norm map.
pub fn norm_histograms(norms: &CertaintyMap, counts: &[u8]) -> Result<NormHistogramSet> {
    let mut set = NormHistogramSet::empty();
    set.accumulate(norms, counts)?;
    Ok(set)
}

/// Clamps values to their `[lo, hi]` percentiles, for display only.
pub fn percentile_clip(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = (q / 100.0 * (sorted.len() - 1) as f64).round() as usize;
        sorted[pos.min(sorted.len() - 1)]
    };
    let (a, b) = (at(lo), at(hi));
    values.iter().map(|v| v.clamp(a, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, DspConfig, Waveform};
    use crate::model::HierarchySpec;

    fn hyper_config(c: f64) -> ModelConfig {
        ModelConfig {
            curvature: c,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn origin_embeddings_give_zero_maps() {
        let z = Tensor::zeros(&[6, 2]);
        for kind in [CertaintyKind::HyperbolicNorm, CertaintyKind::HyperbolicDistance] {
            let m = hyperbolic_certainty_map(&z, 2, 3, &hyper_config(0.1), kind).unwrap();
            assert!(m.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn distance_at_norm_point_nine() {
        let z = Tensor::matrix(1, 2, vec![0.9, 0.0]).unwrap();
        let m = hyperbolic_certainty_map(&z, 1, 1, &hyper_config(1.0), CertaintyKind::HyperbolicDistance).unwrap();
        assert!((m.values[0] - 2.0 * 0.9f64.atanh()).abs() < 1e-12);
        assert!((m.values[0] - 2.9444).abs() < 1e-4);
        let n = hyperbolic_certainty_map(&z, 1, 1, &hyper_config(1.0), CertaintyKind::HyperbolicNorm).unwrap();
        assert!((n.values[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn norm_and_distance_share_ordering() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 7) % 13) as f64 * 0.2 - 1.2).collect();
        let z = Tensor::matrix(10, 2, data).unwrap();
        let cfg = hyper_config(0.1);
        let n = hyperbolic_certainty_map(&z, 2, 5, &cfg, CertaintyKind::HyperbolicNorm).unwrap();
        let d = hyperbolic_certainty_map(&z, 2, 5, &cfg, CertaintyKind::HyperbolicDistance).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(n.values[i] < n.values[j], d.values[i] < d.values[j]);
            }
        }
    }

    #[test]
    fn euclidean_embeddings_are_rejected() {
        let cfg = ModelConfig {
            mode: MlrMode::Euclidean,
            ..ModelConfig::default()
        };
        let z = Tensor::zeros(&[1, 2]);
        assert!(hyperbolic_certainty_map(&z, 1, 1, &cfg, CertaintyKind::HyperbolicNorm).is_err());
    }

    fn toy_masks() -> (MaskTensor, CertaintyMap) {
        let values: Vec<f64> = (0..24).map(|i| (i as f64 + 1.0) / 25.0).collect();
        let masks = MaskTensor::new(2, 3, 4, values).unwrap();
        let cert = CertaintyMap::new(
            CertaintyKind::HyperbolicNorm,
            3,
            4,
            (0..12).map(|i| i as f64 / 12.5).collect(),
        )
        .unwrap();
        (masks, cert)
    }

    #[test]
    fn zero_threshold_keeps_masks_bit_identical() {
        let (m, c) = toy_masks();
        let out = threshold_masks(&m, &c, 0.0).unwrap();
        assert!(out
            .values
            .iter()
            .zip(&m.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn threshold_above_max_silences_everything() {
        let (m, c) = toy_masks();
        let out = threshold_masks(&m, &c, c.max() + 1e-3).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
        assert!(threshold_masks(&m, &c, 1.0).is_err());
        assert!(threshold_masks(&m, &c, -0.1).is_err());
    }

    #[test]
    fn silenced_sets_are_nested() {
        let (m, c) = toy_masks();
        let grid = threshold_grid();
        assert_eq!(grid.len(), 20);
        assert!((grid[19] - 0.95).abs() < 1e-12);
        let mut prev: Vec<bool> = vec![false; 12];
        for theta in grid {
            let out = threshold_masks(&m, &c, theta).unwrap();
            let silenced: Vec<bool> = out.class(0).iter().map(|v| *v == 0.0).collect();
            for (p, s) in prev.iter().zip(&silenced) {
                assert!(!p || *s);
            }
            prev = silenced;
        }
    }

    #[test]
    fn neg_entropy_of_uniform_is_minus_ln_k() {
        let z = neg_entropy(&[0.2; 5], 5);
        assert!((z[0] + 5f64.ln()).abs() < 1e-12);
        assert!((z[0] + 1.6094).abs() < 1e-4);
        assert_eq!(neg_entropy(&[1.0, 0.0, 0.0], 3)[0], 0.0);
    }

    fn tiny_model() -> (SeparationModel, ComplexSpectrogram) {
        let cfg = ModelConfig {
            hidden: 8,
            ..ModelConfig::default()
        };
        let dsp = DspConfig::default();
        let model = SeparationModel::init(cfg, HierarchySpec::default(), dsp, 5).unwrap();
        let w = Waveform::new((0..1024).map(|i| (i as f64 * 0.37).sin() * 0.1).collect(), 8000);
        (model, stft(&w, dsp).unwrap())
    }

    #[test]
    fn single_pass_without_dropout_is_deterministic_softmax() {
        let (model, x) = tiny_model();
        let b = bayesian_certainty(&model, &x, 1, 0.0, 1).unwrap();
        let out = model.forward_masks(&x).unwrap();
        let k = model.hierarchy.leaves.len();
        let n = x.frames * x.bins;
        for i in 0..n {
            let z: f64 = (0..k).map(|c| out.leaf_masks.class(c)[i]).map(|p| p * p.ln()).sum();
            assert!((b.map.values[i] - z).abs() < 1e-12);
        }
        assert!(b.batch_std_error.is_none());
        assert!(bayesian_certainty(&model, &x, 0, 0.5, 1).is_err());
    }

    #[test]
    fn mc_dropout_is_reproducible_and_bounded() {
        let (model, x) = tiny_model();
        let a = bayesian_certainty(&model, &x, 200, MC_DROPOUT_RATE, 11).unwrap();
        let b = bayesian_certainty(&model, &x, 200, MC_DROPOUT_RATE, 11).unwrap();
        assert!(a
            .map
            .values
            .iter()
            .zip(&b.map.values)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let lo = -(5f64.ln()) - 1e-12;
        assert!(a.map.values.iter().all(|v| *v >= lo && *v <= 0.0));
        assert!(a.batch_std_error.unwrap() < 0.05);
        let c = bayesian_certainty(&model, &x, 200, MC_DROPOUT_RATE, 12).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn pearson_cases() {
        let a = CertaintyMap::new(CertaintyKind::HyperbolicNorm, 2, 2, vec![0.1, 0.5, 0.3, 0.9]).unwrap();
        let neg = CertaintyMap::new(
            CertaintyKind::BayesianEntropy,
            2,
            2,
            a.values.iter().map(|v| -v).collect(),
        )
        .unwrap();
        assert!((pearson_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = CertaintyMap::new(CertaintyKind::HyperbolicNorm, 2, 2, vec![0.4; 4]).unwrap();
        assert!(pearson_correlation(&flat, &a).is_err());
        let other = CertaintyMap::new(CertaintyKind::HyperbolicNorm, 1, 4, a.values.clone()).unwrap();
        assert!(pearson_correlation(&a, &other).is_err());
    }

    #[test]
    fn histograms_partition_bins() {
        let norms = CertaintyMap::new(CertaintyKind::HyperbolicNorm, 2, 4, vec![0.0; 8]).unwrap();
        let counts = [0, 1, 2, 3, 4, 5, 1, 0];
        let h = norm_histograms(&norms, &counts).unwrap();
        assert_eq!(h.population(), 8);
        assert_eq!(h.buckets[4].label, "4+");
        assert_eq!(h.buckets[4].population, 2);
        for b in &h.buckets {
            assert_eq!(b.counts.iter().sum::<u64>(), b.population);
            assert_eq!(b.counts[1..].iter().sum::<u64>(), 0);
        }
        assert!(norm_histograms(&norms, &counts[..7]).is_err());
    }

    #[test]
    fn percentile_clip_bounds() {
        let v: Vec<f64> = (0..101).map(f64::from).collect();
        let c = percentile_clip(&v, 30.0, 95.0);
        assert_eq!(c[0], 30.0);
        assert_eq!(c[100], 95.0);
        assert_eq!(c[50], 50.0);
    }
}
