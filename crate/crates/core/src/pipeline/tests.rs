use super::*;
use crate::certainty::threshold_grid;
use crate::data::{build_manifest, generate_split, TEST, TRAIN, VALIDATION};
use crate::dsp::{read_wav, DspConfig};
use crate::error::Error;
use crate::model::{load_checkpoint, save_checkpoint};
use crate::objectives::{si_sdr, LossKind};

fn small_config() -> RunConfig {
    RunConfig {
        hidden: 8,
        layers: 1,
        epochs: 2,
        batch_size: 4,
        chunk_seconds: 0.5,
        lr: 1e-2,
        ..RunConfig::default()
    }
}

fn small_data() -> (crate::data::DatasetManifest, Vec<Track>, Vec<Track>, Vec<Track>) {
    let m = build_manifest(10, 1.0, 21).unwrap();
    let tr = generate_split(&m, TRAIN).unwrap();
    let va = generate_split(&m, VALIDATION).unwrap();
    let te = generate_split(&m, TEST).unwrap();
    (m, tr, va, te)
}

#[test]
fn run_config_defaults() {
    let c = RunConfig::default();
    assert_eq!(c.chunk_seconds, 3.2);
    assert_eq!(c.batch_size, 10);
    assert_eq!(c.lr, 1e-3);
    assert_eq!(c.epochs, 30);
    assert_eq!(c.loss, LossKind::CeIbmW);
    assert_eq!(c.curvature, 0.1);
    assert_eq!(c.embedding_dim, 2);
    c.validate().unwrap();
    assert_eq!(chunk_samples(3.2, &DspConfig::default()), 25600);
}

#[test]
fn run_config_toml_round_trip() {
    let c = small_config();
    let text = c.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    let partial = RunConfig::from_toml("epochs = 5\nloss = \"psa\"\nmode = \"euclidean\"\n").unwrap();
    assert_eq!(partial.epochs, 5);
    assert_eq!(partial.loss, LossKind::Psa);
    assert_eq!(partial.batch_size, 10);
    assert!(matches!(RunConfig::from_toml("epoch = 5"), Err(Error::Config(_))));
    assert!(RunConfig::from_toml("epochs = 0").is_err());
    assert!(RunConfig::from_toml("lr = -1.0").is_err());
}

#[test]
fn smoke_training_is_deterministic_and_checkpointable() {
    let (m, tr, va, _) = small_data();
    let cfg = small_config();
    let a = train(&cfg, &m.hierarchy, DspConfig::default(), &tr, &va, |_| {}).unwrap();
    let b = train(&cfg, &m.hierarchy, DspConfig::default(), &tr, &va, |_| {}).unwrap();
    assert_eq!(a.log.epochs.len(), 2);
    assert_eq!(
        a.log.epochs.last().unwrap().val_loss.to_bits(),
        b.log.epochs.last().unwrap().val_loss.to_bits()
    );
    assert_eq!(a.model, b.model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &a.model, serde_json::to_value(&a.log).unwrap()).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, a.model);
    assert_eq!(meta["best_epoch"], a.log.best_epoch);
}

#[test]
fn every_loss_kind_trains() {
    let (m, tr, va, _) = small_data();
    for kind in LossKind::ALL {
        let cfg = RunConfig {
            loss: kind,
            epochs: 1,
            ..small_config()
        };
        let out = train(&cfg, &m.hierarchy, DspConfig::default(), &tr[..2], &va[..1], |_| {}).unwrap();
        assert!(out.log.best_val_loss.is_finite(), "{kind:?}");
    }
}

#[test]
fn euclidean_training_keeps_plain_updates() {
    let (m, tr, va, _) = small_data();
    let cfg = RunConfig {
        mode: crate::geometry::MlrMode::Euclidean,
        epochs: 1,
        ..small_config()
    };
    let out = train(&cfg, &m.hierarchy, DspConfig::default(), &tr[..2], &va[..1], |_| {}).unwrap();
    assert!(out.log.best_val_loss.is_finite());
}

#[test]
fn report_rows_follow_their_definitions() {
    let (m, tr, va, te) = small_data();
    let cfg = RunConfig {
        epochs: 1,
        ..small_config()
    };
    let model = train(&cfg, &m.hierarchy, DspConfig::default(), &tr, &va, |_| {})
        .unwrap()
        .model;
    let report = evaluate_report(&model, &te).unwrap();
    let track = &te[0];
    for (k, name) in m.hierarchy.leaves.iter().enumerate() {
        let want = si_sdr(&track.mixture, &track.leaves[k]).unwrap();
        assert_eq!(report.tracks[0].no_proc.classes[name].si_sdr, want);
    }
    for (name, o) in &report.oracle_psf.classes {
        assert!(o.si_sdr >= report.model.classes[name].si_sdr, "{name}");
    }
    let h = report.norm_histograms.as_ref().unwrap();
    let stft = crate::dsp::Stft::new(model.dsp).unwrap();
    let frames = stft.analyze(&track.mixture).unwrap().frames;
    assert_eq!(h.population(), (te.len() * frames * model.dsp.bins()) as u64);

    let sweep = threshold_sweep(&model, &te, None).unwrap();
    assert!(sweep.nested);
    assert_eq!(sweep.points.len(), 20);
    assert_eq!(sweep.points[0].metrics, report.model);
    assert_eq!(sweep.points[0].silenced_fraction, 0.0);
    for w in sweep.points.windows(2) {
        assert!(w[1].silenced_fraction >= w[0].silenced_fraction);
    }
}

#[test]
fn certainty_comparison_reports_every_track() {
    let (m, tr, va, te) = small_data();
    let cfg = RunConfig {
        epochs: 1,
        ..small_config()
    };
    let model = train(&cfg, &m.hierarchy, DspConfig::default(), &tr, &va, |_| {})
        .unwrap()
        .model;
    let cc = certainty_compare(&model, &te, 20, 0.5, 3).unwrap();
    assert_eq!(cc.tracks.len(), te.len());
    for r in &cc.tracks {
        assert!((-1.0..=1.0).contains(&r.pearson));
    }
    assert_eq!(cc, certainty_compare(&model, &te, 20, 0.5, 3).unwrap());
}

#[test]
fn export_bundle_layout() {
    let (m, tr, va, te) = small_data();
    let cfg = RunConfig {
        epochs: 1,
        ..small_config()
    };
    let model = train(&cfg, &m.hierarchy, DspConfig::default(), &tr, &va, |_| {})
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let opts = ExportOptions {
        mc_passes: 10,
        ..ExportOptions::default()
    };
    let manifest = export_bundle(&model, &te[0], dir.path(), &opts).unwrap();
    assert_eq!(manifest.theta_grid, threshold_grid());
    assert_eq!(manifest.audio_file_count(), 141);
    assert_eq!(manifest.classes.len(), 7);
    let wavs = walk(dir.path()).into_iter().filter(|p| p.ends_with(".wav")).count();
    assert_eq!(wavs, 141);
    for kind in [
        "embeddings",
        "norm",
        "distance",
        "bayesian",
        "predicted",
        "leaf_regions",
        "parent_regions",
    ] {
        assert!(manifest.maps.contains_key(kind), "{kind}");
    }
    assert_eq!(BundleManifest::load(dir.path()).unwrap(), manifest);

    let stft = crate::dsp::Stft::new(model.dsp).unwrap();
    let sep = separate(&model, &stft, &te[0].mixture).unwrap();
    let w = read_wav(dir.path().join("audio/0.00/plucked.wav")).unwrap();
    let want: Vec<f64> = sep.leaves[2].samples.iter().map(|v| f64::from(*v as f32)).collect();
    assert!(w.samples.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));

    let raw = std::fs::read(dir.path().join("maps/norm.bin")).unwrap();
    let first = f32::from_le_bytes(raw[..4].try_into().unwrap());
    let norms = sep.norm_map(&model).unwrap();
    assert_eq!(first, norms.values[0] as f32);

    std::fs::remove_file(dir.path().join("audio/0.50/tonal.wav")).unwrap();
    assert!(BundleManifest::load(dir.path()).is_err());
}

fn walk(root: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.to_string_lossy().into_owned());
        }
    }
    out
}

#[test]
fn grid_defaults() {
    let g = default_grid();
    assert_eq!(g.len(), 6);
    assert!(g.contains(&(0.1, 2)) && g.contains(&(1.0, 128)));
}
