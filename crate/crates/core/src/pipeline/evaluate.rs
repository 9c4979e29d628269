use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certainty::{
    bayesian_certainty, hyperbolic_certainty_map, pearson_correlation, threshold_grid, threshold_masks, CertaintyKind,
    CertaintyMap, NormHistogramSet,
};
use crate::data::Track;
use crate::dsp::{
    active_source_count, apply_mask_resynth, oracle_psf_mask, ComplexSpectrogram, MaskTensor, Stft, Waveform,
};
use crate::error::{Error, Result};
use crate::geometry::MlrMode;
use crate::model::{ForwardOutput, SeparationModel};
use crate::objectives::{MetricAverages, MetricReport};

/// Masks, embeddings and resynthesized estimates of one mixture.
#[derive(Debug, Clone)]
pub struct Separation {
    pub mixture: ComplexSpectrogram,
    pub output: ForwardOutput,
    pub parents: Vec<Waveform>,
    pub leaves: Vec<Waveform>,
}

/// Runs the model on a whole mixture and resynthesizes every class.
pub fn separate(model: &SeparationModel, stft: &Stft, mixture: &Waveform) -> Result<Separation> {
    let x = stft.analyze(mixture)?;
    let output = model.forward_masks(&x)?;
    let parents = apply_mask_resynth(stft, &x, &output.parent_masks)?;
    let leaves = apply_mask_resynth(stft, &x, &output.leaf_masks)?;
    Ok(Separation {
        mixture: x,
        output,
        parents,
        leaves,
    })
}

impl Separation {
    /// Normalized-norm map of the embeddings (hyperbolic models only).
    pub fn norm_map(&self, model: &SeparationModel) -> Result<CertaintyMap> {
        self.certainty_map(model, CertaintyKind::HyperbolicNorm)
    }

    pub fn certainty_map(&self, model: &SeparationModel, kind: CertaintyKind) -> Result<CertaintyMap> {
        hyperbolic_certainty_map(
            &self.output.embeddings,
            self.mixture.frames,
            self.mixture.bins,
            &model.config,
            kind,
        )
    }

    /// Estimates after silencing bins below `theta` in both heads.
    pub fn thresholded(&self, stft: &Stft, norms: &CertaintyMap, theta: f64) -> Result<(Vec<Waveform>, Vec<Waveform>)> {
        let pm = threshold_masks(&self.output.parent_masks, norms, theta)?;
        let lm = threshold_masks(&self.output.leaf_masks, norms, theta)?;
        Ok((
            apply_mask_resynth(stft, &self.mixture, &pm)?,
            apply_mask_resynth(stft, &self.mixture, &lm)?,
        ))
    }
}

fn stack_masks(masks: &[MaskTensor]) -> Result<MaskTensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks to stack".into()))?;
    let values = masks.iter().flat_map(|m| m.values.iter().copied()).collect();
    MaskTensor::new(masks.len(), first.frames, first.bins, values)
}

/// Oracle phase-sensitive-filter estimates of every class in `refs`.
pub fn oracle_psf_estimates(stft: &Stft, x: &ComplexSpectrogram, refs: &[Waveform]) -> Result<Vec<Waveform>> {
    let masks = refs
        .iter()
        .map(|r| oracle_psf_mask(&stft.analyze(r)?, x))
        .collect::<Result<Vec<_>>>()?;
    apply_mask_resynth(stft, x, &stack_masks(&masks)?)
}

/// Per-track metric rows of the report mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub track: u32,
    pub model: MetricReport,
    pub no_proc: MetricReport,
    pub oracle_psf: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tracks: Vec<TrackReport>,
    pub model: MetricReport,
    pub no_proc: MetricReport,
    pub oracle_psf: MetricReport,
    /// Normalized-norm histograms by active-source count; hyperbolic only.
    pub norm_histograms: Option<NormHistogramSet>,
}

fn track_report(
    model: &SeparationModel,
    stft: &Stft,
    track: &Track,
) -> Result<(TrackReport, Option<NormHistogramSet>)> {
    let h = &model.hierarchy;
    let sep = separate(model, stft, &track.mixture)?;
    let m = MetricReport::evaluate(h, &sep.parents, &sep.leaves, &track.parents, &track.leaves)?;
    let mix_p = vec![track.mixture.clone(); track.parents.len()];
    let mix_l = vec![track.mixture.clone(); track.leaves.len()];
    let no_proc = MetricReport::evaluate(h, &mix_p, &mix_l, &track.parents, &track.leaves)?;
    let op = oracle_psf_estimates(stft, &sep.mixture, &track.parents)?;
    let ol = oracle_psf_estimates(stft, &sep.mixture, &track.leaves)?;
    let oracle = MetricReport::evaluate(h, &op, &ol, &track.parents, &track.leaves)?;
    let hist = match model.config.mode {
        MlrMode::Hyperbolic => {
            let specs = track
                .leaves
                .iter()
                .map(|w| stft.analyze(w))
                .collect::<Result<Vec<_>>>()?;
            let counts = active_source_count(&specs)?;
            let mut set = NormHistogramSet::empty();
            set.accumulate(&sep.norm_map(model)?, &counts)?;
            Some(set)
        }
        MlrMode::Euclidean => None,
    };
    Ok((
        TrackReport {
            track: track.spec.id,
            model: m,
            no_proc,
            oracle_psf: oracle,
        },
        hist,
    ))
}

fn merge_histograms(sets: impl Iterator<Item = NormHistogramSet>) -> NormHistogramSet {
    let mut out = NormHistogramSet::empty();
    for s in sets {
        for (o, b) in out.buckets.iter_mut().zip(s.buckets) {
            let total = o.population + b.population;
            if total > 0 {
                let sum = o.mean.unwrap_or(0.0) * o.population as f64 + b.mean.unwrap_or(0.0) * b.population as f64;
                o.mean = Some(sum / total as f64);
            }
            o.population = total;
            o.counts.iter_mut().zip(b.counts).for_each(|(a, c)| *a += c);
        }
    }
    out
}

/// Model, No-Proc and Oracle-PSF metrics over `tracks`, averaged per class.
pub fn evaluate_report(model: &SeparationModel, tracks: &[Track]) -> Result<EvaluationReport> {
    if tracks.is_empty() {
        return Err(Error::Data("no tracks to evaluate".into()));
    }
    let stft = Stft::new(model.dsp)?;
    let rows = tracks
        .par_iter()
        .map(|t| track_report(model, &stft, t))
        .collect::<Result<Vec<_>>>()?;
    let h = &model.hierarchy;
    let (tracks, hists): (Vec<TrackReport>, Vec<Option<NormHistogramSet>>) = rows.into_iter().unzip();
    let mean = |f: fn(&TrackReport) -> &MetricReport| {
        let all: Vec<MetricReport> = tracks.iter().map(|t| f(t).clone()).collect();
        MetricReport::mean(h, &all)
    };
    let norm_histograms = match model.config.mode {
        MlrMode::Hyperbolic => Some(merge_histograms(hists.into_iter().flatten())),
        MlrMode::Euclidean => None,
    };
    Ok(EvaluationReport {
        model: mean(|t| &t.model),
        no_proc: mean(|t| &t.no_proc),
        oracle_psf: mean(|t| &t.oracle_psf),
        tracks,
        norm_histograms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub metrics: MetricReport,
    /// Fraction of bins silenced, over all tracks.
    pub silenced_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub points: Vec<SweepPoint>,
    /// Whether the silenced-bin sets grew monotonically on every track.
    pub nested: bool,
}

fn sweep_track(
    model: &SeparationModel,
    stft: &Stft,
    track: &Track,
    grid: &[f64],
) -> Result<(Vec<MetricReport>, Vec<usize>, bool, usize)> {
    let sep = separate(model, stft, &track.mixture)?;
    let norms = sep.norm_map(model)?;
    let mut reports = Vec::with_capacity(grid.len());
    let mut silenced = Vec::with_capacity(grid.len());
    let mut nested = true;
    let mut prev: Vec<bool> = vec![false; norms.values.len()];
    for &theta in grid {
        let now: Vec<bool> = norms.values.iter().map(|v| *v < theta).collect();
        nested &= prev.iter().zip(&now).all(|(p, n)| !p || *n);
        silenced.push(now.iter().filter(|s| **s).count());
        prev = now;
        let (p, l) = sep.thresholded(stft, &norms, theta)?;
        reports.push(MetricReport::evaluate(
            &model.hierarchy,
            &p,
            &l,
            &track.parents,
            &track.leaves,
        )?);
    }
    Ok((reports, silenced, nested, norms.values.len()))
}

/// Metrics over the certainty-threshold grid, thresholding both heads.
pub fn threshold_sweep(model: &SeparationModel, tracks: &[Track], grid: Option<&[f64]>) -> Result<ThresholdSweep> {
    if tracks.is_empty() {
        return Err(Error::Data("no tracks to evaluate".into()));
    }
    let default = threshold_grid();
    let grid = grid.unwrap_or(&default);
    let stft = Stft::new(model.dsp)?;
    let rows = tracks
        .par_iter()
        .map(|t| sweep_track(model, &stft, t, grid))
        .collect::<Result<Vec<_>>>()?;
    let total_bins: usize = rows.iter().map(|r| r.3).sum();
    let nested = rows.iter().all(|r| r.2);
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let per_track: Vec<MetricReport> = rows.iter().map(|r| r.0[i].clone()).collect();
            let silenced: usize = rows.iter().map(|r| r.1[i]).sum();
            SweepPoint {
                theta,
                metrics: MetricReport::mean(&model.hierarchy, &per_track),
                silenced_fraction: silenced as f64 / total_bins as f64,
            }
        })
        .collect();
    Ok(ThresholdSweep { points, nested })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackCorrelation {
    pub track: u32,
    /// Pearson ρ between the origin-distance map and the Bayesian map.
    pub pearson: f64,
    /// Pearson ρ between the normalized-norm map and the Bayesian map.
    pub pearson_norm: f64,
    pub batch_std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyComparison {
    pub passes: usize,
    pub dropout_rate: f64,
    pub tracks: Vec<TrackCorrelation>,
    pub mean_pearson: f64,
    pub min_pearson: f64,
}

/// Per-track correlation between hyperbolic and Monte-Carlo-dropout certainty.
pub fn certainty_compare(
    model: &SeparationModel,
    tracks: &[Track],
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<CertaintyComparison> {
    if tracks.is_empty() {
        return Err(Error::Data("no tracks to evaluate".into()));
    }
    let stft = Stft::new(model.dsp)?;
    let mut rows = Vec::with_capacity(tracks.len());
    for t in tracks {
        let x = stft.analyze(&t.mixture)?;
        let out = model.forward_masks(&x)?;
        let map = |kind| hyperbolic_certainty_map(&out.embeddings, x.frames, x.bins, &model.config, kind);
        let dist = map(CertaintyKind::HyperbolicDistance)?;
        let norm = map(CertaintyKind::HyperbolicNorm)?;
        let bayes = bayesian_certainty(model, &x, passes, dropout_rate, seed ^ u64::from(t.spec.id))?;
        rows.push(TrackCorrelation {
            track: t.spec.id,
            pearson: pearson_correlation(&dist, &bayes.map)?,
            pearson_norm: pearson_correlation(&norm, &bayes.map)?,
            batch_std_error: bayes.batch_std_error,
        });
    }
    let mean_pearson = rows.iter().map(|r| r.pearson).sum::<f64>() / rows.len() as f64;
    let min_pearson = rows.iter().map(|r| r.pearson).fold(f64::INFINITY, f64::min);
    Ok(CertaintyComparison {
        passes,
        dropout_rate,
        tracks: rows,
        mean_pearson,
        min_pearson,
    })
}

/// One cell of the curvature / embedding-dimension grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub curvature: f64,
    pub embedding_dim: usize,
    pub best_val_loss: f64,
    /// Test averages over parents, leaves and all classes.
    pub averages: MetricAverages,
}

/// Default curvature / dimension pairs.
pub fn default_grid() -> Vec<(f64, usize)> {
    let mut out = Vec::new();
    for c in [0.1, 1.0] {
        for l in [2, 16, 128] {
            out.push((c, l));
        }
    }
    out
}
