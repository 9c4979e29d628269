use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Generation recipe of one leaf source. All values are fixed when the
/// manifest is built, so a track can be regenerated from its entry alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeafRecipe {
    /// Harmonic stack with a new fundamental per note.
    LowHarmonic {
        f0_min: f64,
        f0_max: f64,
        note_seconds: f64,
        max_harmonic_hz: f64,
    },
    /// Voice-like harmonic tone with vibrato and a syllabic envelope.
    MidHarmonic {
        f0_min: f64,
        f0_max: f64,
        vibrato_hz: f64,
        vibrato_depth: f64,
        syllable_hz: f64,
        max_harmonic_hz: f64,
    },
    /// Exponentially decaying tones at random onsets.
    Plucked {
        f_min: f64,
        f_max: f64,
        onsets_per_second: f64,
        decay_seconds: f64,
    },
    /// Broadband noise bursts on a tempo grid.
    Percussive { bpm: f64, decay_seconds: f64 },
    /// Band-limited noise under a slow amplitude modulation.
    BandNoise { low_hz: f64, high_hz: f64, am_hz: f64 },
}

impl LeafRecipe {
    /// Draws a recipe of the given default-taxonomy leaf.
    pub fn sample(leaf: usize, rng: &mut ChaCha8Rng) -> Option<Self> {
        Some(match leaf {
            0 => LeafRecipe::LowHarmonic {
                f0_min: 60.0,
                f0_max: 120.0,
                note_seconds: rng.random_range(0.4..0.8),
                max_harmonic_hz: 1400.0,
            },
            1 => LeafRecipe::MidHarmonic {
                f0_min: 200.0,
                f0_max: 400.0,
                vibrato_hz: rng.random_range(4.0..7.0),
                vibrato_depth: rng.random_range(0.01..0.03),
                syllable_hz: rng.random_range(2.0..4.0),
                max_harmonic_hz: 2500.0,
            },
            2 => LeafRecipe::Plucked {
                f_min: 300.0,
                f_max: 800.0,
                onsets_per_second: rng.random_range(2.0..4.0),
                decay_seconds: rng.random_range(0.1..0.3),
            },
            3 => LeafRecipe::Percussive {
                bpm: rng.random_range(90.0..150.0),
                decay_seconds: rng.random_range(0.01..0.04),
            },
            4 => LeafRecipe::BandNoise {
                low_hz: 1000.0,
                high_hz: 3000.0,
                am_hz: rng.random_range(0.5..2.0),
            },
            _ => return None,
        })
    }

    /// Renders `n` samples at `sr` Hz; unit scale, not yet level-adjusted.
    pub fn render(&self, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            LeafRecipe::LowHarmonic {
                f0_min,
                f0_max,
                note_seconds,
                max_harmonic_hz,
            } => {
                let note_len = ((note_seconds * sr) as usize).max(1);
                let mut out = vec![0.0; n];
                let mut start = 0;
                while start < n {
                    let end = (start + note_len).min(n);
                    let f0 = rng.random_range(f0_min..f0_max);
                    let count = (max_harmonic_hz / f0).floor().max(1.0) as usize;
                    let phases: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..TAU)).collect();
                    for (i, o) in out[start..end].iter_mut().enumerate() {
                        let t = i as f64 / sr;
                        let env = fade(i, end - start, sr);
                        let mut v = 0.0;
                        for (h, ph) in phases.iter().enumerate() {
                            let k = (h + 1) as f64;
                            v += (TAU * k * f0 * t + ph).sin() / k;
                        }
                        *o = env * v;
                    }
                    start = end;
                }
                out
            }
            LeafRecipe::MidHarmonic {
                f0_min,
                f0_max,
                vibrato_hz,
                vibrato_depth,
                syllable_hz,
                max_harmonic_hz,
            } => {
                let syllable_len = ((sr / syllable_hz) as usize).max(1);
                let mut out = vec![0.0; n];
                let mut phase = 0.0;
                let mut f0 = rng.random_range(f0_min..f0_max);
                let vib_phase = rng.random_range(0.0..TAU);
                for (i, o) in out.iter_mut().enumerate() {
                    let pos = i % syllable_len;
                    if pos == 0 {
                        f0 = rng.random_range(f0_min..f0_max);
                    }
                    let t = i as f64 / sr;
                    let f = f0 * (1.0 + vibrato_depth * (TAU * vibrato_hz * t + vib_phase).sin());
                    phase = (phase + TAU * f / sr) % (TAU * 1024.0);
                    // voiced for the first 70% of each syllable
                    let voiced = (0.7 * syllable_len as f64) as usize;
                    let env = if pos < voiced {
                        (std::f64::consts::PI * pos as f64 / voiced as f64).sin()
                    } else {
                        0.0
                    };
                    let count = (max_harmonic_hz / f).floor().max(1.0) as usize;
                    let mut v = 0.0;
                    for h in 1..=count {
                        let k = h as f64;
                        v += (k * phase).sin() / (k * k);
                    }
                    *o = env * v;
                }
                out
            }
            LeafRecipe::Plucked {
                f_min,
                f_max,
                onsets_per_second,
                decay_seconds,
            } => {
                let mut out = vec![0.0; n];
                let events = ((n as f64 / sr) * onsets_per_second).round().max(1.0) as usize;
                for _ in 0..events {
                    let onset = rng.random_range(0..n);
                    let f = rng.random_range(f_min..f_max);
                    let len = ((decay_seconds * 6.0 * sr) as usize).min(n - onset);
                    for i in 0..len {
                        let t = i as f64 / sr;
                        let attack = (i as f64 / (0.002 * sr)).min(1.0);
                        let env = attack * (-t / decay_seconds).exp();
                        let v =
                            (TAU * f * t).sin() + 0.4 * (TAU * 2.0 * f * t).sin() + 0.15 * (TAU * 3.0 * f * t).sin();
                        out[onset + i] += env * v;
                    }
                }
                out
            }
            LeafRecipe::Percussive { bpm, decay_seconds } => {
                let mut out = vec![0.0; n];
                // eighth notes on the grid, each one sounding with probability 0.7
                let step = ((60.0 / bpm / 2.0) * sr) as usize;
                let offset = rng.random_range(0..step.max(1));
                let len = (decay_seconds * 8.0 * sr) as usize;
                let mut onset = offset;
                while onset < n {
                    if rng.random_bool(0.7) {
                        let gain = rng.random_range(0.5..1.0);
                        for i in 0..len.min(n - onset) {
                            let env = (-(i as f64) / (decay_seconds * sr)).exp();
                            let noise: f64 = StandardNormal.sample(rng);
                            out[onset + i] += gain * env * noise;
                        }
                    }
                    onset += step.max(1);
                }
                out
            }
            LeafRecipe::BandNoise { low_hz, high_hz, am_hz } => {
                let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let mut band = bandpass(&noise, sr, low_hz, high_hz);
                let am_phase = rng.random_range(0.0..TAU);
                for (i, v) in band.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *v *= 0.55 + 0.45 * (TAU * am_hz * t + am_phase).sin();
                }
                band
            }
        }
    }
}

/// 10 ms raised-cosine fade in and out of a note of `len` samples.
fn fade(i: usize, len: usize, sr: f64) -> f64 {
    let ramp = ((0.01 * sr) as usize).max(1).min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
    }
}

/// Zeroes every FFT bin outside `[low, high]` Hz.
fn bandpass(x: &[f64], sr: f64, low: f64, high: f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * sr / n as f64;
        if f < low || f > high {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

/// Scales `x` to the given RMS and rounds every sample to `f32` precision.
pub(crate) fn level(mut x: Vec<f64>, rms: f64) -> Vec<f64> {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let g = if cur > 0.0 { rms / cur } else { 0.0 };
    for v in x.iter_mut() {
        *v = f64::from((*v * g) as f32);
    }
    x
}

/// Per-leaf random stream derived from the track seed.
pub(crate) fn leaf_rng(track_seed: u64, leaf: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(track_seed);
    rng.set_stream(leaf as u64 + 1);
    rng
}
