use std::f64::consts::PI;
use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, Bindings, Graph, Tensor};

fn cfg() -> DspConfig {
    DspConfig::default()
}

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000)
}

fn spec_from(mags: &[f64], frames: usize, bins: usize) -> ComplexSpectrogram {
    ComplexSpectrogram {
        frames,
        bins,
        data: mags.iter().map(|m| Complex64::new(*m, 0.0)).collect(),
        config: cfg(),
        length: None,
    }
}

#[test]
fn window_squares_overlap_add_to_one() {
    let w = sqrt_hann(256);
    for i in 0..128 {
        assert_relative_eq!(w[i] * w[i] + w[i + 128] * w[i + 128], 1.0, epsilon = 1e-15);
    }
}

#[test]
fn zero_in_zero_out() {
    let s = stft(&Waveform::new(vec![0.0; 1000], 8000), cfg()).unwrap();
    assert!(s.data.iter().all(|z| z.norm() == 0.0));
    let y = istft(&s).unwrap();
    assert_eq!(y.len(), 1000);
    assert!(y.samples.iter().all(|v| *v == 0.0));
}

#[test]
fn empty_waveform_is_rejected() {
    assert!(stft(&Waveform::new(vec![], 8000), cfg()).is_err());
}

#[test]
fn frame_count_and_bins() {
    let s = stft(&noise(1000, 1), cfg()).unwrap();
    assert_eq!(s.bins, 129);
    assert_eq!(s.frames, 1000usize.div_ceil(128) + 1);
    assert_eq!(s.data.len(), s.frames * s.bins);
}

#[test]
fn sinusoid_peaks_at_bin_32() {
    let x: Vec<f64> = (0..2048)
        .map(|n| (2.0 * PI * 1000.0 * n as f64 / 8000.0).sin())
        .collect();
    let s = stft(&Waveform::new(x.clone(), 8000), cfg()).unwrap();
    let t = 5;
    let row: Vec<f64> = (0..s.bins).map(|f| s.at(t, f).norm()).collect();
    let peak = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(peak, 32);

    // direct DFT of the same windowed frame
    let w = sqrt_hann(256);
    let start = t * 128 - 128;
    for k in [0usize, 31, 32, 33, 100] {
        let mut acc = Complex64::new(0.0, 0.0);
        for n in 0..256 {
            let phase = -2.0 * PI * (k * n) as f64 / 256.0;
            acc += Complex64::from_polar(x[start + n] * w[n], phase);
        }
        assert!((acc - s.at(t, k)).norm() < 1e-9, "bin {k}");
    }
}

#[test]
fn round_trip_noise_and_am_tone() {
    let w = noise(8000, 2);
    let y = istft(&stft(&w, cfg()).unwrap()).unwrap();
    assert_eq!(y.len(), w.len());
    assert!(snr_db(&w.samples, &y.samples) > 100.0);

    let tone: Vec<f64> = (0..12345)
        .map(|n| {
            let t = n as f64 / 8000.0;
            (1.0 + 0.8 * (2.0 * PI * 4.0 * t).sin()) * (2.0 * PI * 220.0 * t).sin()
        })
        .collect();
    let w = Waveform::new(tone, 8000);
    let y = istft(&stft(&w, cfg()).unwrap()).unwrap();
    assert!(snr_db(&w.samples, &y.samples) > 100.0);
}

#[test]
fn synthesis_rejects_foreign_config() {
    let mut s = stft(&noise(500, 3), cfg()).unwrap();
    s.config.hop = 64;
    assert!(Stft::new(cfg()).unwrap().synthesize(&s).is_err());
}

#[test]
fn mask_resynthesis_identities() {
    let st = Stft::new(cfg()).unwrap();
    let w = noise(4000, 4);
    let x = st.analyze(&w).unwrap();
    let ones = MaskTensor::filled(1, x.frames, x.bins, 1.0);
    let y = apply_mask_resynth(&st, &x, &ones).unwrap();
    assert!(snr_db(&w.samples, &y[0].samples) > 100.0);

    let zeros = MaskTensor::filled(1, x.frames, x.bins, 0.0);
    let y = apply_mask_resynth(&st, &x, &zeros).unwrap();
    assert!(y[0].samples.iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = x.frames * x.bins;
    let mut vals = vec![0.0; 2 * n];
    for i in 0..n {
        let m = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        vals[i] = m;
        vals[n + i] = 1.0 - m;
    }
    let m = MaskTensor::new(2, x.frames, x.bins, vals).unwrap();
    let y = apply_mask_resynth(&st, &x, &m).unwrap();
    let sum: Vec<f64> = y[0].samples.iter().zip(&y[1].samples).map(|(a, b)| a + b).collect();
    assert!(snr_db(&w.samples, &sum) > 100.0);

    let bad = MaskTensor::filled(1, x.frames, x.bins, 1.5);
    assert!(apply_mask_resynth(&st, &x, &bad).is_err());
    let wrong = MaskTensor::filled(1, x.frames + 1, x.bins, 0.5);
    assert!(apply_mask_resynth(&st, &x, &wrong).is_err());
}

#[test]
fn ibm_argmax_and_ties() {
    let a = spec_from(&[0.9, 0.5, 0.0], 1, 3);
    let b = spec_from(&[0.1, 0.5, 0.0], 1, 3);
    let m = ideal_binary_mask(&[a, b]).unwrap();
    assert_eq!(m.class(0), &[1.0, 1.0, 1.0]);
    assert_eq!(m.class(1), &[0.0, 0.0, 0.0]);
    assert!(ideal_binary_mask(&[]).is_err());
}

#[test]
fn psf_cases() {
    let x = ComplexSpectrogram {
        frames: 1,
        bins: 4,
        data: vec![
            Complex64::new(1.0, 1.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(-3.0, 0.5),
            Complex64::new(0.0, 0.0),
        ],
        config: cfg(),
        length: None,
    };
    let m = oracle_psf_mask(&x, &x).unwrap();
    assert_eq!(m.class(0)[..3], [1.0, 1.0, 1.0]);
    assert_eq!(m.class(0)[3], 0.0);

    let mut half = x.clone();
    half.data.iter_mut().for_each(|z| *z *= 0.5);
    let m = oracle_psf_mask(&half, &x).unwrap();
    for v in &m.class(0)[..3] {
        assert_relative_eq!(*v, 0.5, epsilon = 1e-15);
    }

    let mut orth = x.clone();
    orth.data.iter_mut().for_each(|z| *z *= Complex64::new(0.0, 1.0));
    let m = oracle_psf_mask(&orth, &x).unwrap();
    for v in m.class(0) {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn activity_counts() {
    // bin 0: silent; bin 1: one dominant; bin 2: five equal; bin 3 anchors each peak.
    let quiet = 1e-3;
    let srcs: Vec<ComplexSpectrogram> = (0..5)
        .map(|k| {
            let dominant = if k == 0 { 1.0 } else { quiet };
            spec_from(&[0.0, dominant, 1.0, 1.0], 1, 4)
        })
        .collect();
    let c = active_source_count(&srcs).unwrap();
    assert_eq!(c, vec![0, 1, 5, 5]);
    assert!(active_source_count(&[]).is_err());
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = noise(1000, 6);
    let p = dir.path().join("a.wav");
    write_wav(&p, &w).unwrap();
    let r = read_wav(&p).unwrap();
    assert_eq!(r.sample_rate, 8000);
    for (a, b) in w.samples.iter().zip(&r.samples) {
        assert_eq!(*a as f32 as f64, *b);
    }
    let p16 = dir.path().join("b.wav");
    write_wav_pcm16(&p16, &w).unwrap();
    let r = read_wav(&p16).unwrap();
    for (a, b) in w.samples.iter().zip(&r.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    assert_eq!(wav_bytes(&w).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn wav_rejects_stereo() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wr = hound::WavWriter::create(&p, spec).unwrap();
    wr.write_sample(0i16).unwrap();
    wr.write_sample(0i16).unwrap();
    wr.finalize().unwrap();
    assert!(read_wav(&p).is_err());
}

#[test]
fn masked_istft_matches_resynthesis_and_differences() {
    let st = Stft::new(cfg()).unwrap();
    let w = noise(600, 7);
    let x = st.analyze(&w).unwrap();
    let n = x.frames * x.bins;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mask: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.0..1.0)).collect();
    let op = Arc::new(MaskedIstft::new(st.clone(), x.clone(), w.len()).unwrap());

    let mut b = Bindings::new();
    b.insert("m", Tensor::matrix(n, 2, mask.clone()).unwrap());
    let weights: Vec<f64> = (0..2 * w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let m = g.param("m");
    let y = g.custom(op, &[m]);
    let out = g.evaluate(y, &b).unwrap().clone();

    let mt = MaskTensor::from_bin_major(2, x.frames, x.bins, &mask).unwrap();
    let reference = apply_mask_resynth(&st, &x, &mt).unwrap();
    for (k, r) in reference.iter().enumerate() {
        assert_eq!(out.row(k), r.samples.as_slice());
    }

    let wc = g.constant(Tensor::matrix(2, w.len(), weights).unwrap());
    let prod = g.mul(y, wc);
    let loss = g.sum(prod);
    let report = finite_diff_check(&mut g, loss, &b, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perfect_reconstruction(len in 256usize..3000, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut w = noise(len, seed);
        w.samples.iter_mut().for_each(|v| *v *= scale);
        let y = istft(&stft(&w, cfg()).unwrap()).unwrap();
        prop_assert_eq!(y.len(), len);
        prop_assert!(snr_db(&w.samples, &y.samples) > 100.0);
    }

    #[test]
    fn resynthesis_is_linear_in_mask(seed in any::<u64>()) {
        let st = Stft::new(cfg()).unwrap();
        let w = noise(1500, seed);
        let x = st.analyze(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let n = x.frames * x.bins;
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let comp: Vec<f64> = vals.iter().map(|v| 1.0 - v).collect();
        let m = MaskTensor::new(2, x.frames, x.bins, [vals, comp].concat()).unwrap();
        let y = apply_mask_resynth(&st, &x, &m).unwrap();
        let sum: Vec<f64> = y[0].samples.iter().zip(&y[1].samples).map(|(a, b)| a + b).collect();
        prop_assert!(snr_db(&w.samples, &sum) > 100.0);
    }
}
