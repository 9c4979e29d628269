//! UI bundle for one track.
//!
//! ```text
//! manifest.json
//! audio/mixture.wav
//! audio/<theta>/<class>.wav       theta formatted with two decimals
//! maps/<kind>.bin                 32-bit float little-endian, row-major
//! ```
//!
//! Map kinds: `embeddings` ((T·F) x L, scaled by √c into the unit disk),
//! `norm`, `distance`, `bayesian` and `predicted` (T x F), and for L = 2
//! `leaf_regions` / `parent_regions` (G x G argmax class over the disk,
//! row 0 at y = -1, -1 outside the disk).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::certainty::{
    bayesian_certainty, percentile_clip, threshold_grid, CertaintyKind, MC_DROPOUT_RATE, MC_PASSES,
};
use crate::data::Track;
use crate::dsp::{write_wav, Stft};
use crate::error::{Error, Result};
use crate::geometry::MlrMode;
use crate::model::{SeparationModel, LEAF_A, LEAF_P, PARENT_A, PARENT_P};
use crate::objectives::{ClassMetrics, MetricAverages, MetricReport};

use super::evaluate::separate;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
/// Side length of the decision-region rasters.
pub const REGION_GRID: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleClass {
    pub name: String,
    /// `"parent"` or `"leaf"`.
    pub level: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDescriptor {
    pub path: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// 30th and 95th percentiles, for color scaling only.
    pub display_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaMetrics {
    pub theta: f64,
    pub label: String,
    pub classes: BTreeMap<String, ClassMetrics>,
    pub averages: MetricAverages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub track: u32,
    pub sample_rate: u32,
    pub frames: usize,
    pub bins: usize,
    pub embedding_dim: usize,
    pub curvature: f64,
    pub mode: MlrMode,
    pub classes: Vec<BundleClass>,
    pub theta_grid: Vec<f64>,
    pub mixture: String,
    /// theta label → class → WAV path.
    pub audio: BTreeMap<String, BTreeMap<String, String>>,
    pub metrics: Vec<ThetaMetrics>,
    pub maps: BTreeMap<String, MapDescriptor>,
}

/// Directory name of a threshold.
pub fn theta_label(theta: f64) -> String {
    format!("{theta:.2}")
}

impl BundleManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
        m.validate(root)?;
        Ok(m)
    }

    /// Checks the grid, per-theta coverage and that every referenced file
    /// exists with the declared size.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("bundle: {msg}")));
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.format_version));
        }
        if self.theta_grid.first() != Some(&0.0) {
            return bad("threshold grid must start at 0".into());
        }
        if self.theta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("threshold grid must be strictly ascending".into());
        }
        if self.metrics.len() != self.theta_grid.len() {
            return bad("one metrics entry per threshold is required".into());
        }
        if !root.join(&self.mixture).is_file() {
            return bad(format!("missing {}", self.mixture));
        }
        for theta in &self.theta_grid {
            let label = theta_label(*theta);
            let Some(per_class) = self.audio.get(&label) else {
                return bad(format!("no audio for theta {label}"));
            };
            for c in &self.classes {
                match per_class.get(&c.name) {
                    Some(p) if root.join(p).is_file() => {}
                    _ => return bad(format!("missing audio for {} at {label}", c.name)),
                }
            }
        }
        for (kind, d) in &self.maps {
            let expected = 4 * d.shape.iter().product::<usize>() as u64;
            match fs::metadata(root.join(&d.path)) {
                Ok(meta) if meta.len() == expected => {}
                _ => return bad(format!("map {kind} missing or of the wrong size")),
            }
        }
        Ok(())
    }

    pub fn audio_file_count(&self) -> usize {
        1 + self.audio.values().map(BTreeMap::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    pub thetas: Vec<f64>,
    /// Monte-Carlo passes for the Bayesian map; 0 skips it.
    pub mc_passes: usize,
    pub seed: u64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            thetas: threshold_grid(),
            mc_passes: MC_PASSES,
            seed: 0,
        }
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class of a head over a `REGION_GRID²` raster of the unit disk.
fn region_raster(model: &SeparationModel, p_name: &str, a_name: &str) -> Result<Vec<f64>> {
    let c = model.config.curvature;
    let g = REGION_GRID;
    let mut inside = Vec::new();
    let mut pts = Vec::new();
    for r in 0..g {
        for col in 0..g {
            let x = -1.0 + (2 * col + 1) as f64 / g as f64;
            let y = -1.0 + (2 * r + 1) as f64 / g as f64;
            let ok = x * x + y * y < 1.0;
            inside.push(ok);
            if ok {
                pts.push(x / c.sqrt());
                pts.push(y / c.sqrt());
            }
        }
    }
    let n = pts.len() / 2;
    let mut graph = Graph::new();
    let z = graph.constant(Tensor::matrix(n, 2, pts)?);
    let p = graph.param(p_name);
    let a = graph.param(a_name);
    let logits = graph.mlr_logits(z, p, a, c, model.config.mode);
    let out = graph.evaluate(logits, &model.params)?;
    let mut next = 0;
    Ok(inside
        .iter()
        .map(|ok| {
            if *ok {
                next += 1;
                argmax(out.row(next - 1)) as f64
            } else {
                -1.0
            }
        })
        .collect())
}

/// Writes the UI bundle of `track` under `out`.
pub fn export_bundle(
    model: &SeparationModel,
    track: &Track,
    out: &Path,
    opts: &ExportOptions,
) -> Result<BundleManifest> {
    if model.config.mode != MlrMode::Hyperbolic {
        return Err(Error::InvalidArgument("bundles need a hyperbolic model".into()));
    }
    let stft = Stft::new(model.dsp)?;
    let h = &model.hierarchy;
    let sep = separate(model, &stft, &track.mixture)?;
    let norms = sep.norm_map(model)?;
    let (t, f) = (sep.mixture.frames, sep.mixture.bins);

    fs::create_dir_all(out.join("audio"))?;
    fs::create_dir_all(out.join("maps"))?;
    write_wav(out.join("audio/mixture.wav"), &track.mixture)?;

    let mut classes = Vec::new();
    for name in &h.parents {
        classes.push(BundleClass {
            name: name.clone(),
            level: "parent".into(),
            parent: None,
        });
    }
    for (k, name) in h.leaves.iter().enumerate() {
        classes.push(BundleClass {
            name: name.clone(),
            level: "leaf".into(),
            parent: Some(h.parents[h.leaf_parent[k]].clone()),
        });
    }

    let mut audio = BTreeMap::new();
    let mut metrics = Vec::new();
    for &theta in &opts.thetas {
        let label = theta_label(theta);
        let dir = out.join("audio").join(&label);
        fs::create_dir_all(&dir)?;
        let (pw, lw) = sep.thresholded(&stft, &norms, theta)?;
        let mut files = BTreeMap::new();
        for (name, w) in h.parents.iter().zip(&pw).chain(h.leaves.iter().zip(&lw)) {
            write_wav(dir.join(format!("{name}.wav")), w)?;
            files.insert(name.clone(), format!("audio/{label}/{name}.wav"));
        }
        audio.insert(label.clone(), files);
        let report = MetricReport::evaluate(h, &pw, &lw, &track.parents, &track.leaves)?;
        metrics.push(ThetaMetrics {
            theta,
            label,
            classes: report.classes,
            averages: report.averages,
        });
    }

    let mut maps = BTreeMap::new();
    let mut put = |kind: &str, shape: Vec<usize>, values: &[f64], display: bool| -> Result<()> {
        let path = format!("maps/{kind}.bin");
        write_f32(&out.join(&path), values.iter().copied())?;
        let display_range = display.then(|| {
            let clipped = percentile_clip(values, 30.0, 95.0);
            let lo = clipped.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            [lo, hi]
        });
        maps.insert(
            kind.to_string(),
            MapDescriptor {
                path,
                dtype: "f32le".into(),
                shape,
                display_range,
            },
        );
        Ok(())
    };
    let sc = model.config.curvature.sqrt();
    let emb: Vec<f64> = sep.output.embeddings.data().iter().map(|v| v * sc).collect();
    put("embeddings", vec![t * f, model.config.embedding_dim], &emb, false)?;
    put("norm", vec![t, f], &norms.values, true)?;
    let dist = sep.certainty_map(model, CertaintyKind::HyperbolicDistance)?;
    put("distance", vec![t, f], &dist.values, true)?;
    let kl = h.leaves.len();
    let predicted: Vec<f64> = (0..t * f)
        .map(|i| {
            let row: Vec<f64> = (0..kl).map(|k| sep.output.leaf_masks.class(k)[i]).collect();
            argmax(&row) as f64
        })
        .collect();
    put("predicted", vec![t, f], &predicted, false)?;
    if opts.mc_passes > 0 {
        let b = bayesian_certainty(model, &sep.mixture, opts.mc_passes, MC_DROPOUT_RATE, opts.seed)?;
        put("bayesian", vec![t, f], &b.map.values, true)?;
    }
    if model.config.embedding_dim == 2 {
        put(
            "leaf_regions",
            vec![REGION_GRID, REGION_GRID],
            &region_raster(model, LEAF_P, LEAF_A)?,
            false,
        )?;
        put(
            "parent_regions",
            vec![REGION_GRID, REGION_GRID],
            &region_raster(model, PARENT_P, PARENT_A)?,
            false,
        )?;
    }

    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        track: track.spec.id,
        sample_rate: track.mixture.sample_rate,
        frames: t,
        bins: f,
        embedding_dim: model.config.embedding_dim,
        curvature: model.config.curvature,
        mode: model.config.mode,
        classes,
        theta_grid: opts.thetas.clone(),
        mixture: "audio/mixture.wav".into(),
        audio,
        metrics,
        maps,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    manifest.validate(out)?;
    Ok(manifest)
}
