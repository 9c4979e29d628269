use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, GradientSet, Graph, Tensor};
use crate::data::Track;
use crate::dsp::{ComplexSpectrogram, DspConfig, Stft, Waveform};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, MlrMode};
use crate::model::{features, is_ball_param, Dropout, HierarchySpec, SeparationModel, FEATURES};
use crate::objectives::{hierarchical_term, HeadTargets, LossConfig};
use crate::optim::{adam_step, riemannian_adam_step_rows, AdamHyper, AdamState, PlateauSchedule};

use super::RunConfig;

/// One training or validation example: a mixture chunk and its targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub mixture: ComplexSpectrogram,
    pub parent: HeadTargets,
    pub leaf: HeadTargets,
}

fn slice(w: &Waveform, start: usize, len: usize) -> Waveform {
    Waveform::new(w.samples[start..start + len].to_vec(), w.sample_rate)
}

/// Chunk length in samples, rounded to a whole number of hops.
pub fn chunk_samples(seconds: f64, dsp: &DspConfig) -> usize {
    let hops = (seconds * f64::from(dsp.sample_rate) / dsp.hop as f64).round() as usize;
    hops.max(1) * dsp.hop
}

impl Example {
    /// Targets for `track[start..start + len]` (clipped to the track).
    pub fn from_track(stft: &Stft, track: &Track, start: usize, len: usize, cfg: &LossConfig) -> Result<Self> {
        let total = track.mixture.len();
        let len = len.min(total);
        let start = start.min(total - len);
        let mix = slice(&track.mixture, start, len);
        let mixture = stft.analyze(&mix)?;
        let head = |refs: &[Waveform]| -> Result<HeadTargets> {
            let waves: Vec<Waveform> = refs.iter().map(|w| slice(w, start, len)).collect();
            let specs = waves.iter().map(|w| stft.analyze(w)).collect::<Result<Vec<_>>>()?;
            HeadTargets::build(cfg.kind, stft, &mixture, &specs, &waves)
        };
        let parent = head(&track.parents)?;
        let leaf = head(&track.leaves)?;
        Ok(Self { mixture, parent, leaf })
    }
}

/// Loss of one example and, when `with_grad`, its parameter gradients.
pub fn example_loss(
    model: &SeparationModel,
    ex: &Example,
    cfg: &LossConfig,
    dropout: Option<Dropout>,
    with_grad: bool,
) -> Result<(f64, Option<GradientSet>)> {
    let mut g = Graph::new();
    let nodes = model.build(&mut g, ex.mixture.frames, dropout);
    let p = ex.parent.term(&mut g, nodes.parent_masks, nodes.parent_logits);
    let l = ex.leaf.term(&mut g, nodes.leaf_masks, nodes.leaf_logits);
    let total = hierarchical_term(&mut g, p, l, cfg);
    g.label(total, "training loss");
    let mut inputs = Bindings::new();
    inputs.insert(FEATURES, features(&ex.mixture));
    let loss = g.evaluate_layered(total, &[&inputs, &model.params])?.item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = if with_grad {
        Some(g.gradient(total, &Tensor::scalar(1.0))?)
    } else {
        None
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Optimizer state over the named parameters of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: BTreeMap<String, AdamState>,
    curvature: Option<Curvature>,
}

impl Optimizer {
    pub fn new(model: &SeparationModel, lr: f64) -> Result<Self> {
        let states = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), AdamState::new(v.len(), AdamHyper::with_lr(lr))))
            .collect();
        let curvature = match model.config.mode {
            MlrMode::Hyperbolic => Some(model.curvature()),
            MlrMode::Euclidean => None,
        };
        Ok(Self { states, curvature })
    }

    /// One update; ball parameters take a Riemannian step in hyperbolic mode.
    pub fn step(&mut self, model: &mut SeparationModel, grads: &GradientSet, lr: f64) -> Result<()> {
        for (name, grad) in grads.iter() {
            let state = self.states.get_mut(name).ok_or_else(|| Error::Unbound(name.clone()))?;
            state.hyper.lr = lr;
            let param = model.params.get_mut(name).ok_or_else(|| Error::Unbound(name.clone()))?;
            match self.curvature {
                Some(c) if is_ball_param(name) => riemannian_adam_step_rows(param, grad, c, state)?,
                _ => adam_step(param.data_mut(), grad.data(), state)?,
            }
        }
        Ok(())
    }
}

/// Trained model (best validation epoch) with its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SeparationModel,
    pub log: TrainingLog,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Validation examples: the leading chunk of every track.
pub fn validation_examples(stft: &Stft, tracks: &[Track], cfg: &RunConfig) -> Result<Vec<Example>> {
    let len = chunk_samples(cfg.chunk_seconds, &stft.config());
    tracks
        .iter()
        .map(|t| Example::from_track(stft, t, 0, len, &cfg.loss_config()))
        .collect()
}

/// Mean loss over `examples` without dropout.
pub fn mean_loss(model: &SeparationModel, examples: &[Example], cfg: &LossConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(model, ex, cfg, None, false)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Trains a fresh model. `progress` receives every finished epoch.
pub fn train(
    cfg: &RunConfig,
    hierarchy: &HierarchySpec,
    dsp: DspConfig,
    train_tracks: &[Track],
    val_tracks: &[Track],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_tracks.is_empty() || val_tracks.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let stft = Stft::new(dsp)?;
    let loss_cfg = cfg.loss_config();
    let mut model = SeparationModel::init(cfg.model_config(), hierarchy.clone(), dsp, cfg.seed)?;
    let mut opt = Optimizer::new(&model, cfg.lr)?;
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let val = validation_examples(&stft, val_tracks, cfg)?;
    let chunk = chunk_samples(cfg.chunk_seconds, &dsp);

    let mut best = model.clone();
    let mut log = TrainingLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut rng = epoch_rng(cfg.data_seed, epoch);
        let mut order: Vec<usize> = (0..train_tracks.len()).collect();
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<GradientSet> = None;
            for &i in batch {
                let track = &train_tracks[i];
                let room = track.mixture.len().saturating_sub(chunk) / dsp.hop;
                let start = rng.random_range(0..=room) * dsp.hop;
                let dropout = Dropout {
                    rate: cfg.dropout,
                    after_last: false,
                    seed: rng.next_u64(),
                };
                let ex = Example::from_track(&stft, track, start, chunk, &loss_cfg)?;
                let (loss, grads) = example_loss(&model, &ex, &loss_cfg, Some(dropout), true)?;
                loss_sum += loss;
                let grads = grads.expect("requested");
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.accumulate(&grads)?,
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            opt.step(&mut model, &grads, lr)?;
        }
        let val_loss = mean_loss(&model, &val, &loss_cfg)?;
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.clone();
        }
        schedule.step(val_loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_tracks.len() as f64,
            val_loss,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
        };
        progress(&record);
        log.epochs.push(record);
    }
    Ok(TrainOutcome { model: best, log })
}
