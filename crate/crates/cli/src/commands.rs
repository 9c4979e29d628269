use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hypsep::certainty::{MC_DROPOUT_RATE, MC_PASSES};
use hypsep::data::{self, DatasetManifest, Track};
use hypsep::dsp::DspConfig;
use hypsep::geometry::MlrMode;
use hypsep::model::{load_checkpoint, save_checkpoint, SeparationModel};
use hypsep::objectives::LossKind;
use hypsep::pipeline::{self, ExportOptions, RunConfig, TrainingLog};
use hypsep::Error;

use crate::table;

#[derive(Debug, Parser)]
#[command(name = "hypsep", version, about = "Hyperbolic hierarchical audio source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Dataset(DatasetArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Evaluate(EvaluateArgs),
    /// Write the UI bundle of one track.
    Export(ExportArgs),
    /// Serve a bundle over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = data::DEFAULT_TRACKS)]
    pub tracks: usize,
    /// Track length in seconds.
    #[arg(long, default_value_t = data::DEFAULT_DURATION)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags overriding fields of the TOML run configuration.
#[derive(Debug, Args, Default)]
pub struct RunOverrides {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub head_product: Option<bool>,
    #[arg(long)]
    pub parent_weight: Option<f64>,
    #[arg(long)]
    pub leaf_weight: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hyperbolic,
    Euclidean,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    LossKind::parse(s).map_err(|e| e.to_string())
}

impl RunOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            dataset,
            loss,
            curvature,
            embedding_dim,
            hidden,
            layers,
            dropout,
            head_product,
            parent_weight,
            leaf_weight,
            epochs,
            batch_size,
            chunk_seconds,
            lr,
            seed,
            data_seed
        );
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Hyperbolic => MlrMode::Hyperbolic,
                ModeArg::Euclidean => MlrMode::Euclidean,
            };
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the training log is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Report,
    ThresholdSweep,
    CertaintyCompare,
    CurvatureDimGrid,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = data::TEST)]
    pub split: String,
    #[arg(long, value_enum, default_value_t = EvalMode::Report)]
    pub mode: EvalMode,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print a plain-text table (report mode).
    #[arg(long)]
    pub table: bool,
    /// Monte-Carlo dropout passes (certainty-compare).
    #[arg(long, default_value_t = MC_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `c:L` pairs for the grid, comma separated (default 0.1 and 1 by 2, 16, 128).
    #[arg(long)]
    pub grid: Option<String>,
    /// Training epochs per grid cell; defaults to the checkpoint's.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub track: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated thresholds; defaults to 0, 0.05, ..., 0.95.
    #[arg(long)]
    pub thetas: Option<String>,
    #[arg(long, default_value_t = MC_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory with the built UI assets, served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export(a) => export(a),
        Command::Serve(a) => crate::serve::serve(&a.bundle, a.ui.as_deref(), &a.host, a.port),
    }
}

fn dataset(a: DatasetArgs) -> Result<()> {
    let m = data::build_dataset(&a.out, a.tracks, a.duration, a.seed)?;
    for (name, tracks) in &m.splits {
        eprintln!("{name}: {} tracks", tracks.len());
    }
    Ok(())
}

/// Reads the dataset manifest under `root`.
pub fn open_dataset(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Data(format!("no dataset manifest at {}", path.display())).into());
    }
    Ok(DatasetManifest::load(&path)?)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_toml(&text)?)
        }
    }
}

/// Path of the training log written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let manifest = open_dataset(&cfg.dataset)?;
    let dsp = DspConfig {
        sample_rate: manifest.sample_rate,
        ..DspConfig::default()
    };
    let train_tracks = data::load_split(&cfg.dataset, &manifest, data::TRAIN)?;
    let val_tracks = data::load_split(&cfg.dataset, &manifest, data::VALIDATION)?;
    let out = pipeline::train(&cfg, &manifest.hierarchy, dsp, &train_tracks, &val_tracks, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        )
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&a.out, &out.model, json!({ "config": cfg, "log": out.log }))?;
    fs::write(log_path(&a.out), serde_json::to_vec_pretty(&out.log)?)?;
    eprintln!(
        "best epoch {} (validation loss {:.5}) -> {}",
        out.log.best_epoch,
        out.log.best_val_loss,
        a.out.display()
    );
    Ok(())
}

/// Checkpoint plus the run configuration stored in its metadata.
pub fn open_checkpoint(path: &Path) -> Result<(SeparationModel, RunConfig, Option<TrainingLog>)> {
    let (model, meta) = load_checkpoint(path)?;
    let cfg = match meta.get("config") {
        Some(c) => serde_json::from_value(c.clone()).map_err(|e| Error::Checkpoint(format!("run config: {e}")))?,
        None => RunConfig::default(),
    };
    let log = meta.get("log").and_then(|l| serde_json::from_value(l.clone()).ok());
    Ok((model, cfg, log))
}

fn check_compatible(model: &SeparationModel, manifest: &DatasetManifest) -> Result<()> {
    if model.dsp.sample_rate != manifest.sample_rate {
        return Err(Error::Config(format!(
            "checkpoint expects {} Hz audio, dataset has {} Hz",
            model.dsp.sample_rate, manifest.sample_rate
        ))
        .into());
    }
    if model.hierarchy != manifest.hierarchy {
        return Err(Error::Config("checkpoint and dataset hierarchies differ".into()).into());
    }
    Ok(())
}

fn load_tracks(model: &SeparationModel, root: &Path, split: &str) -> Result<(DatasetManifest, Vec<Track>)> {
    let manifest = open_dataset(root)?;
    check_compatible(model, &manifest)?;
    let tracks = data::load_split(root, &manifest, split)?;
    Ok((manifest, tracks))
}

fn parse_grid(s: &str) -> Result<Vec<(f64, usize)>> {
    s.split(',')
        .map(|pair| {
            let (c, l) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("grid entry '{pair}' is not c:L")))?;
            let c: f64 = c.parse().map_err(|_| Error::Config(format!("bad curvature '{c}'")))?;
            let l: usize = l.parse().map_err(|_| Error::Config(format!("bad dimension '{l}'")))?;
            Ok((c, l))
        })
        .collect()
}

fn parse_thetas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold '{v}'")).into())
        })
        .collect()
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, cfg, _) = open_checkpoint(&a.checkpoint)?;
    let root = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let (manifest, tracks) = load_tracks(&model, &root, &a.split)?;
    let value = match a.mode {
        EvalMode::Report => {
            let report = pipeline::evaluate_report(&model, &tracks)?;
            if a.table {
                eprintln!("{}", table::render_report(&model.hierarchy, &report));
            }
            json!({ "mode": "report", "split": a.split, "report": report })
        }
        EvalMode::ThresholdSweep => {
            let sweep = pipeline::threshold_sweep(&model, &tracks, None)?;
            if a.table {
                eprintln!("{}", table::render_sweep(&sweep));
            }
            json!({ "mode": "threshold-sweep", "split": a.split, "sweep": sweep })
        }
        EvalMode::CertaintyCompare => {
            let cc = pipeline::certainty_compare(&model, &tracks, a.passes, MC_DROPOUT_RATE, a.seed)?;
            json!({ "mode": "certainty-compare", "split": a.split, "comparison": cc })
        }
        EvalMode::CurvatureDimGrid => {
            let pairs = match &a.grid {
                Some(s) => parse_grid(s)?,
                None => pipeline::default_grid(),
            };
            let mut base = cfg.clone();
            base.dataset = root.clone();
            if let Some(e) = a.epochs {
                base.epochs = e;
            }
            let dsp = model.dsp;
            let train_tracks = data::load_split(&root, &manifest, data::TRAIN)?;
            let val_tracks = data::load_split(&root, &manifest, data::VALIDATION)?;
            let grid = pipeline::curvature_dim_grid(
                &base,
                &pairs,
                &manifest.hierarchy,
                dsp,
                &train_tracks,
                &val_tracks,
                &tracks,
                |p| {
                    eprintln!(
                        "c={} L={}: mean SI-SDR {:.2} dB",
                        p.curvature, p.embedding_dim, p.averages.all.si_sdr
                    )
                },
            )?;
            json!({ "mode": "curvature-dim-grid", "split": a.split, "grid": grid })
        }
    };
    emit(&value, a.out.as_deref())
}

fn export(a: ExportArgs) -> Result<()> {
    let (model, cfg, _) = open_checkpoint(&a.checkpoint)?;
    let root = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let manifest = open_dataset(&root)?;
    check_compatible(&model, &manifest)?;
    let spec = manifest
        .splits
        .values()
        .flatten()
        .find(|t| t.id == a.track)
        .ok_or_else(|| Error::Data(format!("no track {} in the dataset", a.track)))?;
    let track = if data::track_dir(&root, spec).is_dir() {
        data::load_track(&root, spec, &manifest.hierarchy)?
    } else {
        data::generate_track(spec, &manifest.hierarchy)?
    };
    let mut opts = ExportOptions {
        mc_passes: a.passes,
        seed: a.seed,
        ..ExportOptions::default()
    };
    if let Some(t) = &a.thetas {
        opts.thetas = parse_thetas(t)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let bundle = pipeline::export_bundle(&model, &track, &a.out, &opts)?;
    eprintln!(
        "wrote {} audio files and {} maps to {}",
        bundle.audio_file_count(),
        bundle.maps.len(),
        a.out.display()
    );
    Ok(())
}
