use super::*;
use crate::objectives::si_sdr;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn small_manifest() -> DatasetManifest {
    build_manifest(10, 2.0, 7).unwrap()
}

fn band_fraction(x: &[f64], sr: f64, below_hz: f64) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut low, mut total) = (0.0, 0.0);
    for (k, b) in buf.iter().enumerate().take(n / 2 + 1) {
        let e = b.norm_sqr();
        total += e;
        if (k as f64) * sr / (n as f64) < below_hz {
            low += e;
        }
    }
    low / total
}

fn crest(x: &[f64]) -> f64 {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    peak / rms
}

#[test]
fn same_spec_is_bit_identical() {
    let m = small_manifest();
    let t = &m.splits[TRAIN][0];
    for k in 0..t.leaves.len() {
        let a = synth_leaf_source(t, k).unwrap();
        let b = synth_leaf_source(t, k).unwrap();
        assert_eq!(a.samples.len(), t.samples());
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn unknown_leaf_is_rejected() {
    let m = small_manifest();
    assert!(matches!(synth_leaf_source(&m.splits[TRAIN][0], 5), Err(Error::Data(_))));
}

#[test]
fn low_harmonic_energy_sits_below_1500_hz() {
    let m = small_manifest();
    for t in m.splits.values().flatten() {
        let w = synth_leaf_source(t, 0).unwrap();
        let frac = band_fraction(&w.samples, 8000.0, 1500.0);
        assert!(frac >= 0.9, "track {}: {frac}", t.id);
    }
}

#[test]
fn percussive_is_peakier_than_low_harmonic() {
    let m = small_manifest();
    for t in m.splits.values().flatten() {
        let low = synth_leaf_source(t, 0).unwrap();
        let perc = synth_leaf_source(t, 3).unwrap();
        assert!(crest(&perc.samples) > crest(&low.samples), "track {}", t.id);
    }
}

#[test]
fn band_noise_stays_in_band() {
    let m = small_manifest();
    let w = synth_leaf_source(&m.splits[TRAIN][0], 4).unwrap();
    let below = band_fraction(&w.samples, 8000.0, 990.0);
    let above = 1.0 - band_fraction(&w.samples, 8000.0, 3010.0);
    assert!(below < 1e-3 && above < 1e-3, "{below} {above}");
}

#[test]
fn leaf_levels_match_their_rms() {
    let m = small_manifest();
    let t = &m.splits[TRAIN][1];
    for (k, ls) in t.leaves.iter().enumerate() {
        let w = synth_leaf_source(t, k).unwrap();
        let rms = (w.samples.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((rms - ls.rms).abs() < 1e-5, "{rms} vs {}", ls.rms);
        assert!(w.samples.iter().all(|v| f64::from(*v as f32) == *v));
    }
}

#[test]
fn mixing_is_exactly_additive() {
    let m = small_manifest();
    let track = generate_track(&m.splits[TRAIN][0], &m.hierarchy).unwrap();
    for n in 0..track.mixture.len() {
        let mut s = 0.0;
        for l in &track.leaves {
            s += l.samples[n];
        }
        assert_eq!(track.mixture.samples[n] - s, 0.0);
        let mut ps = 0.0;
        for p in &track.parents {
            ps += p.samples[n];
        }
        assert!((ps - track.mixture.samples[n]).abs() <= 1e-15);
    }
    for (p, sub) in track.parents.iter().enumerate() {
        for n in 0..sub.len() {
            let mut s = 0.0;
            for k in m.hierarchy.children(p) {
                s += track.leaves[k].samples[n];
            }
            assert_eq!(sub.samples[n], s);
        }
    }
}

#[test]
fn single_nonzero_leaf_is_the_mixture() {
    let h = HierarchySpec::default();
    let mut leaves = vec![Waveform::new(vec![0.0; 64], 8000); 5];
    leaves[2] = Waveform::new((0..64).map(|i| (i as f64 * 0.3).sin()).collect(), 8000);
    let (mix, parents) = mix_track(&leaves, &h).unwrap();
    assert_eq!(mix.samples, leaves[2].samples);
    assert_eq!(parents[0].samples, leaves[2].samples);
    assert!(parents[1].samples.iter().all(|v| *v == 0.0));
}

#[test]
fn length_mismatch_is_rejected() {
    let h = HierarchySpec::default();
    let mut leaves = vec![Waveform::new(vec![0.0; 64], 8000); 5];
    leaves[4] = Waveform::new(vec![0.0; 63], 8000);
    assert!(matches!(mix_track(&leaves, &h), Err(Error::Shape(_))));
}

#[test]
fn split_proportions() {
    assert_eq!(split_sizes(200).unwrap(), (140, 40, 20));
    assert_eq!(split_sizes(10).unwrap(), (7, 2, 1));
    assert!(split_sizes(9).is_err());
    let m = build_manifest(200, 0.5, 1).unwrap();
    assert_eq!(m.splits[TRAIN].len(), 140);
    assert_eq!(m.splits[VALIDATION].len(), 40);
    assert_eq!(m.splits[TEST].len(), 20);
    m.validate().unwrap();
}

#[test]
fn splits_are_disjoint_and_deterministic() {
    let a = build_manifest(30, 1.0, 99).unwrap();
    let b = build_manifest(30, 1.0, 99).unwrap();
    assert_eq!(a, b);
    let ids = |s: &str| a.splits[s].iter().map(|t| t.id).collect::<BTreeSet<_>>();
    assert!(ids(TRAIN).is_disjoint(&ids(VALIDATION)));
    assert!(ids(TRAIN).is_disjoint(&ids(TEST)));
    assert!(ids(VALIDATION).is_disjoint(&ids(TEST)));
    assert_ne!(build_manifest(30, 1.0, 100).unwrap(), a);
}

#[test]
fn bad_duration_is_rejected() {
    assert!(build_manifest(10, 0.0, 1).is_err());
    assert!(build_manifest(10, f64::NAN, 1).is_err());
}

#[test]
fn mixtures_are_challenging() {
    let m = small_manifest();
    let mut total = 0.0;
    let mut count = 0;
    for t in m.splits.values().flatten() {
        let track = generate_track(t, &m.hierarchy).unwrap();
        for leaf in &track.leaves {
            total += si_sdr(&track.mixture, leaf).unwrap();
            count += 1;
        }
    }
    assert!(total / (count as f64) < 0.0);
}

#[test]
fn disk_round_trip_regenerates_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), 10, 0.5, 3).unwrap();
    let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    for t in loaded.splits.values().flatten() {
        let d = track_dir(dir.path(), t);
        assert!(d.join("mixture.wav").is_file());
        assert!(d.join("parent_tonal.wav").is_file());
        assert!(d.join("leaf_band_noise.wav").is_file());
        let from_disk = load_track(dir.path(), t, &loaded.hierarchy).unwrap();
        let regen = generate_track(t, &loaded.hierarchy).unwrap();
        assert_eq!(from_disk, regen);
    }
}
