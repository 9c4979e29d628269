//! Synthetic hierarchical mixture corpus.
//!
//! Two parents ("tonal", "noisy") over five leaf recipes. Each track is
//! described by a [`TrackSpec`] that fully determines its audio, so the
//! manifest alone regenerates every file bit-exactly.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/tracks/<id>/mixture.wav
//! <root>/tracks/<id>/parent_<name>.wav
//! <root>/tracks/<id>/leaf_<name>.wav
//! ```

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::model::HierarchySpec;

pub use synth::LeafRecipe;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
pub const DEFAULT_TRACKS: usize = 200;
pub const DEFAULT_DURATION: f64 = 6.0;
pub const MIN_TRACKS: usize = 10;

pub const TRAIN: &str = "train";
pub const VALIDATION: &str = "validation";
pub const TEST: &str = "test";

/// One leaf of a track: its class name, target RMS level and recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSpec {
    pub class: String,
    pub rms: f64,
    pub recipe: LeafRecipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub id: u32,
    pub seed: u64,
    pub duration: f64,
    pub sample_rate: u32,
    pub leaves: Vec<LeafSpec>,
}

impl TrackSpec {
    pub fn samples(&self) -> usize {
        (self.duration * f64::from(self.sample_rate)).round() as usize
    }

    pub fn dir_name(&self) -> String {
        format!("{:04}", self.id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Data(format!("track {}: duration must be positive", self.id)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Data(format!("track {}: zero sample rate", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_rate: u32,
    pub master_seed: u64,
    pub hierarchy: HierarchySpec,
    pub splits: BTreeMap<String, Vec<TrackSpec>>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[TrackSpec]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("manifest has no split '{name}'")))
    }

    pub fn track_count(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    /// Checks version, hierarchy, split disjointness and seed uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                self.format_version
            )));
        }
        self.hierarchy.validate()?;
        let mut ids = BTreeSet::new();
        let mut seeds = BTreeSet::new();
        for t in self.splits.values().flatten() {
            t.validate()?;
            if !ids.insert(t.id) {
                return Err(Error::Data(format!("track {} appears twice", t.id)));
            }
            if !seeds.insert(t.seed) {
                return Err(Error::Data(format!("track {} reuses a seed", t.id)));
            }
            if t.leaves.len() != self.hierarchy.leaves.len() {
                return Err(Error::Data(format!("track {} has {} leaves", t.id, t.leaves.len())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// A generated track: leaves in hierarchy order, parent submixes, mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub spec: TrackSpec,
    pub leaves: Vec<Waveform>,
    pub parents: Vec<Waveform>,
    pub mixture: Waveform,
}

/// Renders leaf `leaf` of a track.
pub fn synth_leaf_source(spec: &TrackSpec, leaf: usize) -> Result<Waveform> {
    spec.validate()?;
    let ls = spec
        .leaves
        .get(leaf)
        .ok_or_else(|| Error::Data(format!("track {} has no leaf {leaf}", spec.id)))?;
    let mut rng = synth::leaf_rng(spec.seed, leaf);
    let raw = ls.recipe.render(spec.samples(), f64::from(spec.sample_rate), &mut rng);
    let samples = synth::level(raw, ls.rms);
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Sums leaves in index order into the mixture and per-parent submixes.
pub fn mix_track(leaves: &[Waveform], hierarchy: &HierarchySpec) -> Result<(Waveform, Vec<Waveform>)> {
    hierarchy.validate()?;
    if leaves.len() != hierarchy.leaves.len() {
        return Err(Error::Shape(format!(
            "{} leaves given, hierarchy has {}",
            leaves.len(),
            hierarchy.leaves.len()
        )));
    }
    let n = leaves[0].len();
    let sr = leaves[0].sample_rate;
    if let Some(bad) = leaves.iter().find(|l| l.len() != n) {
        return Err(Error::Shape(format!("leaf lengths differ: {} vs {n}", bad.len())));
    }
    let mut mix = vec![0.0; n];
    let mut parents = vec![vec![0.0; n]; hierarchy.parents.len()];
    for (k, leaf) in leaves.iter().enumerate() {
        let p = &mut parents[hierarchy.leaf_parent[k]];
        for ((m, s), v) in mix.iter_mut().zip(p.iter_mut()).zip(&leaf.samples) {
            *m += v;
            *s += v;
        }
    }
    Ok((
        Waveform::new(mix, sr),
        parents.into_iter().map(|p| Waveform::new(p, sr)).collect(),
    ))
}

/// Regenerates a full track from its spec.
pub fn generate_track(spec: &TrackSpec, hierarchy: &HierarchySpec) -> Result<Track> {
    let leaves = (0..spec.leaves.len())
        .map(|k| synth_leaf_source(spec, k))
        .collect::<Result<Vec<_>>>()?;
    let (mixture, parents) = mix_track(&leaves, hierarchy)?;
    Ok(Track {
        spec: spec.clone(),
        leaves,
        parents,
        mixture,
    })
}

/// Generates every track of a split in memory, in manifest order.
pub fn generate_split(manifest: &DatasetManifest, split: &str) -> Result<Vec<Track>> {
    manifest
        .split(split)?
        .par_iter()
        .map(|t| generate_track(t, &manifest.hierarchy))
        .collect()
}

/// Split sizes for `n` tracks at 70/20/10.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < MIN_TRACKS {
        return Err(Error::Data(format!("need at least {MIN_TRACKS} tracks, got {n}")));
    }
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.2).round() as usize;
    let test = n - train - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Data(format!("{n} tracks leave an empty split")));
    }
    Ok((train, val, test))
}

/// Builds the manifest of a dataset with the default taxonomy.
pub fn build_manifest(n_tracks: usize, duration: f64, master_seed: u64) -> Result<DatasetManifest> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Data("duration must be positive".into()));
    }
    let (n_train, n_val, _) = split_sizes(n_tracks)?;
    let hierarchy = HierarchySpec::default();
    let mut seeds = BTreeSet::new();
    let mut tracks = Vec::with_capacity(n_tracks);
    for id in 0..n_tracks as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(u64::from(id));
        let mut seed = rng.next_u64();
        while !seeds.insert(seed) {
            seed = rng.next_u64();
        }
        let mut leaves = Vec::with_capacity(hierarchy.leaves.len());
        for (k, class) in hierarchy.leaves.iter().enumerate() {
            let recipe =
                LeafRecipe::sample(k, &mut rng).ok_or_else(|| Error::Data(format!("no recipe for leaf {class}")))?;
            leaves.push(LeafSpec {
                class: class.clone(),
                rms: rng.random_range(0.05..0.15),
                recipe,
            });
        }
        tracks.push(TrackSpec {
            id,
            seed,
            duration,
            sample_rate: DEFAULT_SAMPLE_RATE,
            leaves,
        });
    }
    let test = tracks.split_off(n_train + n_val);
    let val = tracks.split_off(n_train);
    let mut splits = BTreeMap::new();
    splits.insert(TRAIN.to_string(), tracks);
    splits.insert(VALIDATION.to_string(), val);
    splits.insert(TEST.to_string(), test);
    Ok(DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        sample_rate: DEFAULT_SAMPLE_RATE,
        master_seed,
        hierarchy,
        splits,
    })
}

/// Builds the manifest and writes every track under `root`.
pub fn build_dataset(root: &Path, n_tracks: usize, duration: f64, master_seed: u64) -> Result<DatasetManifest> {
    let manifest = build_manifest(n_tracks, duration, master_seed)?;
    fs::create_dir_all(root.join("tracks"))?;
    manifest
        .splits
        .values()
        .flatten()
        .collect::<Vec<_>>()
        .par_iter()
        .try_for_each(|t| write_track(root, &generate_track(t, &manifest.hierarchy)?, &manifest.hierarchy))?;
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

pub fn track_dir(root: &Path, spec: &TrackSpec) -> PathBuf {
    root.join("tracks").join(spec.dir_name())
}

pub fn write_track(root: &Path, track: &Track, hierarchy: &HierarchySpec) -> Result<()> {
    let dir = track_dir(root, &track.spec);
    fs::create_dir_all(&dir)?;
    write_wav(dir.join("mixture.wav"), &track.mixture)?;
    for (name, w) in hierarchy.parents.iter().zip(&track.parents) {
        write_wav(dir.join(format!("parent_{name}.wav")), w)?;
    }
    for (name, w) in hierarchy.leaves.iter().zip(&track.leaves) {
        write_wav(dir.join(format!("leaf_{name}.wav")), w)?;
    }
    Ok(())
}

/// Reads a track's leaves from disk and re-sums mixture and submixes.
pub fn load_track(root: &Path, spec: &TrackSpec, hierarchy: &HierarchySpec) -> Result<Track> {
    let dir = track_dir(root, spec);
    let leaves = hierarchy
        .leaves
        .iter()
        .map(|name| read_wav(dir.join(format!("leaf_{name}.wav"))))
        .collect::<Result<Vec<_>>>()?;
    let (mixture, parents) = mix_track(&leaves, hierarchy)?;
    Ok(Track {
        spec: spec.clone(),
        leaves,
        parents,
        mixture,
    })
}

/// Loads a split from disk when `root` holds the track files, otherwise
/// regenerates it from the manifest.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<Track>> {
    manifest
        .split(split)?
        .par_iter()
        .map(|t| {
            if track_dir(root, t).is_dir() {
                load_track(root, t, &manifest.hierarchy)
            } else {
                generate_track(t, &manifest.hierarchy)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
