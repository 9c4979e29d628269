use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Framing parameters shared by analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            fft_size: 256,
            hop: 128,
        }
    }
}

impl DspConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fft size {} must be even and >= 2",
                self.fft_size
            )));
        }
        if self.hop * 2 != self.fft_size {
            return Err(Error::Config(format!(
                "hop {} must be half the fft size {} for perfect reconstruction",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Mono signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided complex spectrogram, frame-major (`data[t * bins + f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub config: DspConfig,
    /// Length of the analysed signal, used to trim the synthesis output.
    pub length: Option<usize>,
}

impl ComplexSpectrogram {
    pub fn zeros_like(other: &ComplexSpectrogram) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); other.data.len()],
            ..other.clone()
        }
    }

    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn same_layout(&self, other: &ComplexSpectrogram) -> bool {
        self.frames == other.frames && self.bins == other.bins && self.config == other.config
    }

    /// Frame range `[start, start + count)` as its own spectrogram.
    pub fn slice_frames(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.frames {
            return Err(Error::Shape(format!(
                "frames {start}..{} out of {}",
                start + count,
                self.frames
            )));
        }
        Ok(Self {
            frames: count,
            bins: self.bins,
            data: self.data[start * self.bins..(start + count) * self.bins].to_vec(),
            config: self.config,
            length: None,
        })
    }
}

/// Periodic square-root Hann window; its square overlap-adds to one at
/// 50% overlap.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Planned STFT analysis/synthesis pair.
///
/// The signal is preceded by `hop` zeros so that every sample is covered by
/// exactly two frames; the tail of the last frame is zero-padded.
#[derive(Clone)]
pub struct Stft {
    config: DspConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: DspConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: sqrt_hann(config.fft_size),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
        })
    }

    pub fn config(&self) -> DspConfig {
        self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("cannot analyse an empty waveform".into()));
        }
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "waveform at {} Hz, analysis configured for {} Hz",
                w.sample_rate, self.config.sample_rate
            )));
        }
        let (n, hop, bins) = (self.config.fft_size, self.config.hop, self.config.bins());
        let frames = self.config.frames_for(w.len());
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                // padded index t*hop + i maps to sample t*hop + i - hop
                let s = (t * hop + i).checked_sub(hop).and_then(|k| w.samples.get(k));
                *b = Complex64::new(s.copied().unwrap_or(0.0) * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(ComplexSpectrogram {
            frames,
            bins,
            data,
            config: self.config,
            length: Some(w.len()),
        })
    }

    /// Windowed real frame `t` of the inverse transform, before overlap-add.
    fn synth_frame(&self, s: &ComplexSpectrogram, t: usize, buf: &mut [Complex64], out: &mut [f64]) {
        let (n, bins) = (self.config.fft_size, s.bins);
        let row = &s.data[t * bins..(t + 1) * bins];
        buf[0] = Complex64::new(row[0].re, 0.0);
        buf[n / 2] = Complex64::new(row[n / 2].re, 0.0);
        for k in 1..n / 2 {
            buf[k] = row[k];
            buf[n - k] = row[k].conj();
        }
        self.inverse.process(buf);
        let scale = 1.0 / n as f64;
        for i in 0..n {
            out[i] = buf[i].re * scale * self.window[i];
        }
    }

    pub fn synthesize(&self, s: &ComplexSpectrogram) -> Result<Waveform> {
        if s.config != self.config || s.bins != self.config.bins() || s.data.len() != s.frames * s.bins {
            return Err(Error::Shape(
                "spectrogram metadata does not match the synthesis config".into(),
            ));
        }
        if s.frames == 0 {
            return Err(Error::InvalidArgument("spectrogram has no frames".into()));
        }
        let (n, hop) = (self.config.fft_size, self.config.hop);
        let padded_len = (s.frames - 1) * hop + n;
        let mut acc = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut frame = vec![0.0; n];
        for t in 0..s.frames {
            self.synth_frame(s, t, &mut buf, &mut frame);
            for (a, v) in acc[t * hop..t * hop + n].iter_mut().zip(&frame) {
                *a += v;
            }
        }
        let natural = (s.frames - 1) * hop;
        let len = s.length.unwrap_or(natural).min(padded_len - hop);
        Ok(Waveform::new(acc[hop..hop + len].to_vec(), self.config.sample_rate))
    }

    /// Real FFT of a length-`fft_size` real frame; returns the one-sided bins.
    pub(crate) fn rfft(&self, frame: &[f64], buf: &mut [Complex64]) {
        for (b, v) in buf.iter_mut().zip(frame) {
            *b = Complex64::new(*v, 0.0);
        }
        self.forward.process(buf);
    }
}

pub fn stft(w: &Waveform, config: DspConfig) -> Result<ComplexSpectrogram> {
    Stft::new(config)?.analyze(w)
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    Stft::new(s.config)?.synthesize(s)
}

/// Signal-to-noise ratio of `estimate` against `reference`, in dB.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (sig / err.max(f64::MIN_POSITIVE)).log10()
}
