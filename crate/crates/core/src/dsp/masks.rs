use rustfft::num_complex::Complex64;

use super::stft::{ComplexSpectrogram, Stft, Waveform};
use crate::error::{Error, Result};

/// Silent-mixture bins below this magnitude get a zero oracle mask.
pub const SILENT_BIN: f64 = 1e-12;

/// Activity requires a bin energy within this many dB of the source's peak.
pub const ACTIVITY_RANGE_DB: f64 = 20.0;

/// Activity requires a magnitude ratio above this value.
pub const ACTIVITY_RATIO: f64 = 0.1;

/// Real-valued masks, class-major (`values[(k * frames + t) * bins + f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub classes: usize,
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl MaskTensor {
    pub fn new(classes: usize, frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * frames * bins {
            return Err(Error::Shape(format!(
                "mask of {} values for {classes}x{frames}x{bins}",
                values.len()
            )));
        }
        Ok(Self {
            classes,
            frames,
            bins,
            values,
        })
    }

    pub fn filled(classes: usize, frames: usize, bins: usize, value: f64) -> Self {
        Self {
            classes,
            frames,
            bins,
            values: vec![value; classes * frames * bins],
        }
    }

    /// Builds a mask from a bin-major matrix (`rows[(t * bins + f) * classes + k]`),
    /// the layout produced by the model heads.
    pub fn from_bin_major(classes: usize, frames: usize, bins: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != classes * frames * bins {
            return Err(Error::Shape("bin-major mask size".into()));
        }
        let n = frames * bins;
        let mut values = vec![0.0; rows.len()];
        for i in 0..n {
            for k in 0..classes {
                values[k * n + i] = rows[i * classes + k];
            }
        }
        Self::new(classes, frames, bins, values)
    }

    /// Mask of class `k` as a frame-major slice.
    pub fn class(&self, k: usize) -> &[f64] {
        let n = self.frames * self.bins;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn class_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.frames * self.bins;
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, t: usize, f: usize) -> f64 {
        self.values[(k * self.frames + t) * self.bins + f]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Applies each class mask to the mixture and resynthesizes with the
/// mixture phase.
pub fn apply_mask_resynth(stft: &Stft, x: &ComplexSpectrogram, masks: &MaskTensor) -> Result<Vec<Waveform>> {
    if masks.frames != x.frames || masks.bins != x.bins {
        return Err(Error::Shape(format!(
            "mask {}x{} for spectrogram {}x{}",
            masks.frames, masks.bins, x.frames, x.bins
        )));
    }
    if !masks.in_unit_range() {
        return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
    }
    (0..masks.classes)
        .map(|k| {
            let mut est = x.clone();
            for (z, m) in est.data.iter_mut().zip(masks.class(k)) {
                *z *= *m;
            }
            stft.synthesize(&est)
        })
        .collect()
}

fn check_sources(sources: &[ComplexSpectrogram]) -> Result<&ComplexSpectrogram> {
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one source is required".into()))?;
    if sources.iter().any(|s| !s.same_layout(first)) {
        return Err(Error::Shape("sources have different layouts".into()));
    }
    Ok(first)
}

/// One-hot mask selecting the loudest source per bin (ties go to the lowest
/// class index).
pub fn ideal_binary_mask(sources: &[ComplexSpectrogram]) -> Result<MaskTensor> {
    let first = check_sources(sources)?;
    let (k, n) = (sources.len(), first.data.len());
    let mut mask = MaskTensor::filled(k, first.frames, first.bins, 0.0);
    for i in 0..n {
        let mut best = 0;
        let mut best_mag = sources[0].data[i].norm();
        for (j, s) in sources.iter().enumerate().skip(1) {
            let m = s.data[i].norm();
            if m > best_mag {
                best = j;
                best_mag = m;
            }
        }
        mask.values[best * n + i] = 1.0;
    }
    Ok(mask)
}

/// Phase-sensitive oracle mask `clamp(|S|/|X| cos(∠S - ∠X), 0, 1)`.
pub fn oracle_psf_mask(s: &ComplexSpectrogram, x: &ComplexSpectrogram) -> Result<MaskTensor> {
    if !s.same_layout(x) {
        return Err(Error::Shape("source and mixture layouts differ".into()));
    }
    let values = s.data.iter().zip(&x.data).map(|(sv, xv)| psf_value(*sv, *xv)).collect();
    MaskTensor::new(1, x.frames, x.bins, values)
}

/// `Re(S conj(X)) / |X|^2 = |S|/|X| cos(∠S - ∠X)`, clamped to [0, 1].
pub(crate) fn psf_value(s: Complex64, x: Complex64) -> f64 {
    if x.norm() < SILENT_BIN {
        return 0.0;
    }
    ((s * x.conj()).re / x.norm_sqr()).clamp(0.0, 1.0)
}

/// Number of active sources per bin, frame-major.
///
/// A source is active at a bin when its energy there is within 20 dB of its
/// own loudest bin in the file and its magnitude exceeds a tenth of the
/// summed magnitudes of all sources.
pub fn active_source_count(sources: &[ComplexSpectrogram]) -> Result<Vec<u8>> {
    let first = check_sources(sources)?;
    let n = first.data.len();
    let floor = 10f64.powf(-ACTIVITY_RANGE_DB / 10.0);
    let energies: Vec<Vec<f64>> = sources
        .iter()
        .map(|s| s.data.iter().map(|z| z.norm_sqr()).collect())
        .collect();
    let peaks: Vec<f64> = energies.iter().map(|e| e.iter().cloned().fold(0.0, f64::max)).collect();
    let mut counts = vec![0u8; n];
    for (i, c) in counts.iter_mut().enumerate() {
        let total: f64 = energies.iter().map(|e| e[i].sqrt()).sum();
        if total <= 0.0 {
            continue;
        }
        for (e, peak) in energies.iter().zip(&peaks) {
            let loud = *peak > 0.0 && e[i] >= peak * floor;
            if loud && e[i].sqrt() / total > ACTIVITY_RATIO {
                *c += 1;
            }
        }
    }
    Ok(counts)
}
