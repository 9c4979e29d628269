use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::dsp::{psf_value, ComplexSpectrogram, MaskTensor, MaskedIstft, Stft, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Phase-sensitive approximation, L1 on magnitudes.
    Psa,
    /// Waveform approximation, L1 through the inverse STFT.
    Wa,
    /// Cross entropy against the ideal binary mask.
    CeIbm,
    /// Magnitude-weighted cross entropy against the ideal binary mask.
    CeIbmW,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Psa, LossKind::Wa, LossKind::CeIbm, LossKind::CeIbmW];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Psa => "psa",
            LossKind::Wa => "wa",
            LossKind::CeIbm => "ce-ibm",
            LossKind::CeIbmW => "ce-ibm-w",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}` (expected psa, wa, ce-ibm or ce-ibm-w)")))
    }

    /// Whether the loss acts on logits rather than masks.
    pub fn uses_logits(self) -> bool {
        matches!(self, LossKind::CeIbm | LossKind::CeIbmW)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub parent_weight: f64,
    pub leaf_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::CeIbmW,
            parent_weight: 1.0,
            leaf_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.parent_weight) || !ok(self.leaf_weight) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.parent_weight == 0.0 && self.leaf_weight == 0.0 {
            return Err(Error::Config("parent and leaf loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Precomputed training targets for one head on one spectrogram.
#[derive(Clone)]
pub enum HeadTargets {
    Psa {
        /// `|X|` replicated per class, bin-major `N x K`.
        mix_mag: Tensor,
        targets: Tensor,
    },
    Wa {
        op: Arc<MaskedIstft>,
        refs: Tensor,
    },
    /// Bin-major `N x K` weights `w_n · IBM_nk`.
    Ce {
        weights: Tensor,
    },
}

impl std::fmt::Debug for HeadTargets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadTargets::Psa { .. } => f.write_str("HeadTargets::Psa"),
            HeadTargets::Wa { .. } => f.write_str("HeadTargets::Wa"),
            HeadTargets::Ce { .. } => f.write_str("HeadTargets::Ce"),
        }
    }
}

fn check_layouts(x: &ComplexSpectrogram, sources: &[ComplexSpectrogram]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("at least one source is required".into()));
    }
    if sources.iter().any(|s| !s.same_layout(x)) {
        return Err(Error::Shape("source and mixture layouts differ".into()));
    }
    Ok(())
}

/// PSA targets `clamp(|S| cos(∠S - ∠X), 0, |X|)`, bin-major.
pub fn psa_targets(x: &ComplexSpectrogram, sources: &[ComplexSpectrogram]) -> Result<(Tensor, Tensor)> {
    check_layouts(x, sources)?;
    let (n, k) = (x.data.len(), sources.len());
    let mut mag = vec![0.0; n * k];
    let mut tgt = vec![0.0; n * k];
    for i in 0..n {
        let xm = x.data[i].norm();
        for (j, s) in sources.iter().enumerate() {
            mag[i * k + j] = xm;
            tgt[i * k + j] = psf_value(s.data[i], x.data[i]) * xm;
        }
    }
    Ok((Tensor::matrix(n, k, mag)?, Tensor::matrix(n, k, tgt)?))
}

/// Bin-major one-hot IBM.
pub fn ibm_bin_major(sources: &[ComplexSpectrogram]) -> Result<Tensor> {
    let mask = crate::dsp::ideal_binary_mask(sources)?;
    mask_to_bin_major(&mask)
}

pub fn mask_to_bin_major(mask: &MaskTensor) -> Result<Tensor> {
    let (k, n) = (mask.classes, mask.frames * mask.bins);
    let mut rows = vec![0.0; n * k];
    for j in 0..k {
        for (i, v) in mask.class(j).iter().enumerate() {
            rows[i * k + j] = *v;
        }
    }
    Tensor::matrix(n, k, rows)
}

/// Cross-entropy weights: uniform `1/N` or `|X_n| / Σ|X|`, times the one-hot IBM.
pub fn ce_weights(ibm: &Tensor, x: &ComplexSpectrogram, weighted: bool) -> Result<Tensor> {
    let (n, k) = (ibm.rows(), ibm.cols());
    if n != x.data.len() {
        return Err(Error::Shape(format!("IBM has {n} bins, mixture has {}", x.data.len())));
    }
    for r in 0..n {
        let row = ibm.row(r);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::InvalidArgument(format!("IBM row {r} is not one-hot")));
        }
    }
    let bin_weights: Vec<f64> = if weighted {
        let mags: Vec<f64> = x.data.iter().map(|z| z.norm()).collect();
        let total: f64 = mags.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data("weighted cross entropy on a silent mixture".into()));
        }
        mags.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let data = ibm
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * bin_weights[i / k])
        .collect();
    Tensor::matrix(n, k, data)
}

impl HeadTargets {
    /// Targets for `sources` (one spectrogram and one waveform per class).
    pub fn build(
        kind: LossKind,
        stft: &Stft,
        x: &ComplexSpectrogram,
        sources: &[ComplexSpectrogram],
        source_waves: &[Waveform],
    ) -> Result<Self> {
        check_layouts(x, sources)?;
        Ok(match kind {
            LossKind::Psa => {
                let (mix_mag, targets) = psa_targets(x, sources)?;
                HeadTargets::Psa { mix_mag, targets }
            }
            LossKind::Wa => {
                if source_waves.len() != sources.len() {
                    return Err(Error::Shape("one reference waveform per class is required".into()));
                }
                let len = source_waves[0].len();
                if source_waves.iter().any(|w| w.len() != len) {
                    return Err(Error::Shape("reference waveforms differ in length".into()));
                }
                let covered = (x.frames - 1) * x.config.hop;
                if len > covered || covered - len >= x.config.hop {
                    return Err(Error::Shape(format!(
                        "reference of {len} samples does not match a {}-frame spectrogram",
                        x.frames
                    )));
                }
                let op = Arc::new(MaskedIstft::new(stft.clone(), x.clone(), len)?);
                let refs = source_waves.iter().flat_map(|w| w.samples.iter().copied()).collect();
                HeadTargets::Wa {
                    op,
                    refs: Tensor::matrix(sources.len(), len, refs)?,
                }
            }
            LossKind::CeIbm | LossKind::CeIbmW => {
                let ibm = ibm_bin_major(sources)?;
                HeadTargets::Ce {
                    weights: ce_weights(&ibm, x, kind == LossKind::CeIbmW)?,
                }
            }
        })
    }

    /// Appends the loss term; `masks` and `logits` are the head's bin-major
    /// outputs.
    pub fn term(&self, g: &mut Graph, masks: NodeId, logits: NodeId) -> NodeId {
        match self {
            HeadTargets::Psa { mix_mag, targets } => {
                let mag = g.constant(mix_mag.clone());
                let t = g.constant(targets.clone());
                let est = g.mul(masks, mag);
                let diff = g.sub(est, t);
                let abs = g.abs(diff);
                g.mean(abs)
            }
            HeadTargets::Wa { op, refs } => {
                let y = g.custom(op.clone(), &[masks]);
                let r = g.constant(refs.clone());
                let diff = g.sub(y, r);
                let abs = g.abs(diff);
                g.mean(abs)
            }
            HeadTargets::Ce { weights } => {
                let w = g.constant(weights.clone());
                let ls = g.log_softmax(logits);
                let prod = g.mul(ls, w);
                let s = g.sum(prod);
                g.scale(s, -1.0)
            }
        }
    }
}

/// `parent_weight · parent + leaf_weight · leaf`.
pub fn hierarchical_loss(parent: f64, leaf: f64, cfg: &LossConfig) -> f64 {
    cfg.parent_weight * parent + cfg.leaf_weight * leaf
}

/// Graph form of [`hierarchical_loss`]; zero-weight terms are left out.
pub fn hierarchical_term(g: &mut Graph, parent: NodeId, leaf: NodeId, cfg: &LossConfig) -> NodeId {
    match (cfg.parent_weight > 0.0, cfg.leaf_weight > 0.0) {
        (true, true) => {
            let p = g.scale(parent, cfg.parent_weight);
            let l = g.scale(leaf, cfg.leaf_weight);
            g.add(p, l)
        }
        (true, false) => g.scale(parent, cfg.parent_weight),
        _ => g.scale(leaf, cfg.leaf_weight),
    }
}

fn eval_scalar(g: &mut Graph, out: NodeId) -> Result<f64> {
    g.evaluate(out, &Bindings::new())?.item()
}

/// PSA loss of fixed masks.
pub fn loss_psa(masks: &MaskTensor, x: &ComplexSpectrogram, sources: &[ComplexSpectrogram]) -> Result<f64> {
    if masks.classes != sources.len() || masks.frames != x.frames || masks.bins != x.bins {
        return Err(Error::Shape("mask does not match the sources".into()));
    }
    let (mix_mag, targets) = psa_targets(x, sources)?;
    let mut g = Graph::new();
    let m = g.constant(mask_to_bin_major(masks)?);
    let t = HeadTargets::Psa { mix_mag, targets }.term(&mut g, m, m);
    eval_scalar(&mut g, t)
}

/// WA loss of fixed masks against time-domain references.
pub fn loss_wa(stft: &Stft, masks: &MaskTensor, x: &ComplexSpectrogram, refs: &[Waveform]) -> Result<f64> {
    if masks.classes != refs.len() || masks.frames != x.frames || masks.bins != x.bins {
        return Err(Error::Shape("mask does not match the references".into()));
    }
    let len = refs.first().map(Waveform::len).unwrap_or(0);
    let placeholder = vec![x.clone(); refs.len()];
    let targets = HeadTargets::build(LossKind::Wa, stft, x, &placeholder, refs)?;
    debug_assert!(len > 0);
    let mut g = Graph::new();
    let m = g.constant(mask_to_bin_major(masks)?);
    let t = targets.term(&mut g, m, m);
    eval_scalar(&mut g, t)
}

/// Cross-entropy loss of per-bin logits (bin-major `N x K`) against a
/// one-hot IBM.
pub fn loss_ce(logits: &Tensor, ibm: &MaskTensor, weighted: bool, x: &ComplexSpectrogram) -> Result<f64> {
    let ibm = mask_to_bin_major(ibm)?;
    if logits.shape() != ibm.shape() {
        return Err(Error::Shape("logits do not match the IBM".into()));
    }
    let weights = ce_weights(&ibm, x, weighted)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let t = HeadTargets::Ce { weights }.term(&mut g, l, l);
    eval_scalar(&mut g, t)
}
