use rustfft::num_complex::Complex64;

use super::stft::{ComplexSpectrogram, Stft};
use crate::autodiff::{CustomOp, Tensor};
use crate::error::{Error, Result};

/// Differentiable `mask -> istft(mask ⊙ X)` for a fixed mixture `X`.
///
/// The input is a bin-major `(T·F) x K` mask matrix; the output is `K x len`,
/// one resynthesized waveform per class.
#[derive(Debug, Clone)]
pub struct MaskedIstft {
    stft: Stft,
    mixture: ComplexSpectrogram,
    length: usize,
}

impl MaskedIstft {
    pub fn new(stft: Stft, mixture: ComplexSpectrogram, length: usize) -> Result<Self> {
        if mixture.config != stft.config() {
            return Err(Error::Shape("mixture was analysed with a different config".into()));
        }
        let max_len = (mixture.frames - 1) * stft.config().hop;
        if length > max_len {
            return Err(Error::Shape(format!(
                "requested {length} samples, spectrogram covers {max_len}"
            )));
        }
        Ok(Self { stft, mixture, length })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    fn classes(&self, mask: &Tensor) -> Result<usize> {
        let n = self.mixture.frames * self.mixture.bins;
        if mask.rows() != n {
            return Err(Error::Shape(format!(
                "mask has {} rows, mixture has {n} bins",
                mask.rows()
            )));
        }
        Ok(mask.cols())
    }
}

impl CustomOp for MaskedIstft {
    fn name(&self) -> &'static str {
        "masked_istft"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mask = inputs[0];
        let k = self.classes(mask)?;
        let mut out = Vec::with_capacity(k * self.length);
        let mut est = self.mixture.clone();
        est.length = Some(self.length);
        for class in 0..k {
            for (i, (z, x)) in est.data.iter_mut().zip(&self.mixture.data).enumerate() {
                *z = *x * mask.data()[i * k + class];
            }
            out.extend(self.stft.synthesize(&est)?.samples);
        }
        Tensor::matrix(k, self.length, out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mask = inputs[0];
        let k = self.classes(mask)?;
        let cfg = self.stft.config();
        let (n, hop, bins) = (cfg.fft_size, cfg.hop, self.mixture.bins);
        let window = self.stft.window();
        let mut gm = vec![0.0; mask.len()];
        let mut frame = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for class in 0..k {
            let g = &grad.data()[class * self.length..(class + 1) * self.length];
            for t in 0..self.mixture.frames {
                let mut any = false;
                for (i, f) in frame.iter_mut().enumerate() {
                    let s = (t * hop + i)
                        .checked_sub(hop)
                        .and_then(|j| g.get(j))
                        .copied()
                        .unwrap_or(0.0);
                    *f = s * window[i];
                    any |= s != 0.0;
                }
                if !any {
                    continue;
                }
                self.stft.rfft(&frame, &mut buf);
                for f in 0..bins {
                    let weight = if f == 0 || f == n / 2 { inv_n } else { 2.0 * inv_n };
                    let x = self.mixture.data[t * bins + f];
                    gm[(t * bins + f) * k + class] += weight * (x * buf[f].conj()).re;
                }
            }
        }
        Ok(vec![Some(Tensor::new(mask.shape().to_vec(), gm)?)])
    }
}
