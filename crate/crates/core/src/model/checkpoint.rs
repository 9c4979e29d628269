use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HierarchySpec, ModelConfig, SeparationModel};
use crate::autodiff::{Bindings, Tensor};
use crate::dsp::DspConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub hierarchy: HierarchySpec,
    pub dsp: DspConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `magic | version u32 | manifest length u64 | manifest JSON |
/// tensor data as little-endian f64`.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &SeparationModel, metadata: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        model: model.config.clone(),
        hierarchy: model.hierarchy.clone(),
        dsp: model.dsp,
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SeparationModel, serde_json::Value)> {
    let path = path.as_ref();
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    manifest.model.validate()?;
    manifest.hierarchy.validate()?;
    manifest.dsp.validate()?;

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if rest.len() != total * 8 {
        return Err(bad(&format!("expected {} data bytes, found {}", total * 8, rest.len())));
    }
    let mut params = Bindings::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > total {
            return Err(bad(&format!("tensor `{}` exceeds the data section", e.name)));
        }
        let data = rest[e.offset * 8..(e.offset + n) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }

    // shapes must agree with a model of the declared configuration
    let template = SeparationModel::init(manifest.model.clone(), manifest.hierarchy.clone(), manifest.dsp, 0)?;
    for (name, t) in template.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(bad(&format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(bad(&format!("missing tensor `{name}`"))),
        }
    }
    if params.iter().count() != template.params.iter().count() {
        return Err(bad("unexpected extra tensors"));
    }
    if manifest.model.mode == crate::geometry::MlrMode::Hyperbolic {
        let c = manifest.model.curvature;
        for name in [super::PARENT_P, super::LEAF_P] {
            let t = params.get(name).expect("checked above");
            for r in 0..t.rows() {
                let cx2 = c * crate::geometry::kernels::norm_sq(t.row(r));
                if cx2 >= 1.0 {
                    return Err(bad(&format!("`{name}` row {r} lies outside the ball")));
                }
            }
        }
    }
    let model = SeparationModel {
        config: manifest.model,
        hierarchy: manifest.hierarchy,
        dsp: manifest.dsp,
        params,
    };
    Ok((model, manifest.metadata))
}
