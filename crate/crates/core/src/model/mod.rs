//! The separation network: a bidirectional recurrent encoder over
//! log-magnitude frames, a projection onto the Poincaré ball, and two MLR
//! heads producing parent and leaf masks.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::dsp::{ComplexSpectrogram, DspConfig, MaskTensor};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, MlrMode};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Offset inside the log of the input features.
pub const LOG_FLOOR: f64 = 1e-8;

/// Name of the graph input holding normalized features.
pub const FEATURES: &str = "features";

/// Two-level class taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub parents: Vec<String>,
    pub leaves: Vec<String>,
    /// Parent index of every leaf.
    pub leaf_parent: Vec<usize>,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            parents: vec!["tonal".into(), "noisy".into()],
            leaves: vec![
                "low_harmonic".into(),
                "mid_harmonic".into(),
                "plucked".into(),
                "percussive".into(),
                "band_noise".into(),
            ],
            leaf_parent: vec![0, 0, 0, 1, 1],
        }
    }
}

impl HierarchySpec {
    pub fn validate(&self) -> Result<()> {
        if self.parents.is_empty() {
            return Err(Error::Config("hierarchy needs at least one parent".into()));
        }
        if self.leaves.len() < self.parents.len() {
            return Err(Error::Config(
                "hierarchy needs at least as many leaves as parents".into(),
            ));
        }
        if self.leaf_parent.len() != self.leaves.len() {
            return Err(Error::Config("every leaf needs exactly one parent".into()));
        }
        if let Some(bad) = self.leaf_parent.iter().find(|p| **p >= self.parents.len()) {
            return Err(Error::Config(format!("leaf parent index {bad} out of range")));
        }
        Ok(())
    }

    /// Leaf indices grouped under each parent.
    pub fn children(&self, parent: usize) -> Vec<usize> {
        (0..self.leaves.len())
            .filter(|l| self.leaf_parent[*l] == parent)
            .collect()
    }

    /// Parent names followed by leaf names.
    pub fn class_names(&self) -> Vec<String> {
        self.parents.iter().chain(&self.leaves).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub curvature: f64,
    pub mode: MlrMode,
    pub hidden: usize,
    pub layers: usize,
    /// Dropout between recurrent layers during training.
    pub dropout: f64,
    /// Compose leaf masks as parent mask times within-parent leaf softmax.
    pub head_product: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 2,
            curvature: 0.1,
            mode: MlrMode::Hyperbolic,
            hidden: 64,
            layers: 2,
            dropout: 0.3,
            head_product: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        Curvature::new(self.curvature)?;
        if self.embedding_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(
                "embedding dim, hidden size and layer count must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Inverted dropout with masks drawn from a seeded generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    /// Also drop the output of the last recurrent layer.
    pub after_last: bool,
    pub seed: u64,
}

/// Names of the trainable tensors of the heads.
pub const PARENT_P: &str = "parent.p";
pub const PARENT_A: &str = "parent.a";
pub const LEAF_P: &str = "leaf.p";
pub const LEAF_A: &str = "leaf.a";

/// Whether a named parameter is a set of points on the ball.
pub fn is_ball_param(name: &str) -> bool {
    name == PARENT_P || name == LEAF_P
}

/// Nodes of interest in a model graph.
#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub euclidean: NodeId,
    pub embeddings: NodeId,
    pub parent_logits: NodeId,
    pub leaf_logits: NodeId,
    pub parent_masks: NodeId,
    pub leaf_masks: NodeId,
}

/// Result of running the model on one spectrogram.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub parent_masks: MaskTensor,
    pub leaf_masks: MaskTensor,
    /// Bin-major `(T·F) x L` embeddings (on the ball in hyperbolic mode).
    pub embeddings: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationModel {
    pub config: ModelConfig,
    pub hierarchy: HierarchySpec,
    pub dsp: DspConfig,
    pub params: Bindings,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn rnn_name(layer: usize, dir: &str, what: &str) -> String {
    format!("rnn{layer}.{dir}.{what}")
}

/// Normalized log-magnitude features, `T x F`.
pub fn features(x: &ComplexSpectrogram) -> Tensor {
    let logs: Vec<f64> = x.data.iter().map(|z| (z.norm() + LOG_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let data = logs.iter().map(|v| (v - mean) / std).collect();
    Tensor::matrix(x.frames, x.bins, data).expect("sized")
}

impl SeparationModel {
    /// Freshly initialized model.
    pub fn init(config: ModelConfig, hierarchy: HierarchySpec, dsp: DspConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        hierarchy.validate()?;
        dsp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Bindings::new();
        let (f, h, l) = (dsp.bins(), config.hidden, config.embedding_dim);
        for layer in 0..config.layers {
            let input = if layer == 0 { f } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                params.insert(
                    rnn_name(layer, dir, "w_in"),
                    uniform(&mut rng, input, h, 1.0 / (input as f64).sqrt()),
                );
                params.insert(
                    rnn_name(layer, dir, "w_rec"),
                    uniform(&mut rng, h, h, 1.0 / (h as f64).sqrt()),
                );
                params.insert(rnn_name(layer, dir, "b"), Tensor::zeros(&[h]));
            }
        }
        params.insert(
            "dense.w",
            uniform(&mut rng, 2 * h, f * l, 1.0 / ((2 * h) as f64).sqrt()),
        );
        params.insert("dense.b", Tensor::zeros(&[f * l]));
        for (p_name, a_name, k) in [
            (PARENT_P, PARENT_A, hierarchy.parents.len()),
            (LEAF_P, LEAF_A, hierarchy.leaves.len()),
        ] {
            params.insert(p_name, Tensor::zeros(&[k, l]));
            let a = (0..k * l)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    0.01 * v
                })
                .collect();
            params.insert(a_name, Tensor::matrix(k, l, a)?);
        }
        Ok(Self {
            config,
            hierarchy,
            dsp,
            params,
        })
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.config.curvature).expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn dropout_mask(&self, rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Tensor {
        let keep = 1.0 / (1.0 - rate);
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Tensor::matrix(rows, cols, data).expect("sized")
    }

    /// One recurrent pass over the rows of `pre` (already holding the input
    /// projection plus bias); returns the hidden states in time order.
    fn recurrence(&self, g: &mut Graph, pre: NodeId, w_rec: NodeId, frames: usize, reverse: bool) -> NodeId {
        let h = self.config.hidden;
        let zero = g.constant(Tensor::zeros(&[1, h]));
        let mut prev = zero;
        let mut states = vec![zero; frames];
        let order: Vec<usize> = if reverse {
            (0..frames).rev().collect()
        } else {
            (0..frames).collect()
        };
        for (step, t) in order.into_iter().enumerate() {
            let x_t = g.row(pre, t);
            let act = if step == 0 {
                x_t
            } else {
                let rec = g.matmul(prev, w_rec);
                g.add(x_t, rec)
            };
            prev = g.tanh(act);
            states[t] = prev;
        }
        g.concat_rows(&states)
    }

    /// Appends the model to `g` for an input of `frames` frames.
    pub fn build(&self, g: &mut Graph, frames: usize, dropout: Option<Dropout>) -> ModelNodes {
        let (f, l, h) = (self.dsp.bins(), self.config.embedding_dim, self.config.hidden);
        let c = self.config.curvature;
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
        let mut x = g.input(FEATURES);
        for layer in 0..self.config.layers {
            let mut dirs = Vec::with_capacity(2);
            for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                let w_in = g.param(&rnn_name(layer, dir, "w_in"));
                let w_rec = g.param(&rnn_name(layer, dir, "w_rec"));
                let b = g.param(&rnn_name(layer, dir, "b"));
                let proj = g.matmul(x, w_in);
                let pre = g.add_row(proj, b);
                dirs.push(self.recurrence(g, pre, w_rec, frames, reverse));
            }
            x = g.concat_cols(&dirs);
            let last = layer + 1 == self.config.layers;
            if let (Some(d), Some(rng)) = (dropout, rng.as_mut()) {
                if d.rate > 0.0 && (!last || d.after_last) {
                    let m = self.dropout_mask(rng, frames, 2 * h, d.rate);
                    let m = g.constant(m);
                    x = g.mul(x, m);
                }
            }
        }
        let w = g.param("dense.w");
        let b = g.param("dense.b");
        let dense = g.matmul(x, w);
        let dense = g.add_row(dense, b);
        let euclidean = g.reshape(dense, &[frames * f, l]);
        g.label(euclidean, "euclidean embeddings");
        let embeddings = match self.config.mode {
            MlrMode::Hyperbolic => {
                let z = g.exp0(euclidean, c);
                g.label(z, "ball embeddings");
                z
            }
            MlrMode::Euclidean => euclidean,
        };
        let mode = self.config.mode;
        let (pp, pa) = (g.param(PARENT_P), g.param(PARENT_A));
        let parent_logits = g.mlr_logits(embeddings, pp, pa, c, mode);
        g.label(parent_logits, "parent logits");
        let (lp, la) = (g.param(LEAF_P), g.param(LEAF_A));
        let leaf_logits = g.mlr_logits(embeddings, lp, la, c, mode);
        g.label(leaf_logits, "leaf logits");
        let parent_masks = g.softmax(parent_logits);
        let leaf_masks = g.softmax(leaf_logits);
        ModelNodes {
            euclidean,
            embeddings,
            parent_logits,
            leaf_logits,
            parent_masks,
            leaf_masks,
        }
    }

    fn check_input(&self, x: &ComplexSpectrogram) -> Result<()> {
        if x.bins != self.dsp.bins() || x.config != self.dsp {
            return Err(Error::Shape(format!(
                "model expects {} bins at {:?}, got {} bins",
                self.dsp.bins(),
                self.dsp,
                x.bins
            )));
        }
        if x.frames == 0 {
            return Err(Error::Shape("spectrogram has no frames".into()));
        }
        Ok(())
    }

    /// Runs the model graph up to `target` and returns it with its nodes.
    pub fn run(&self, x: &ComplexSpectrogram, dropout: Option<Dropout>) -> Result<(Graph, ModelNodes)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let nodes = self.build(&mut g, x.frames, dropout);
        let mut inputs = Bindings::new();
        inputs.insert(FEATURES, features(x));
        let last = if nodes.parent_masks.0 > nodes.leaf_masks.0 {
            nodes.parent_masks
        } else {
            nodes.leaf_masks
        };
        g.evaluate_layered(last, &[&inputs, &self.params])?;
        Ok((g, nodes))
    }

    /// Euclidean embeddings, bin-major `(T·F) x L`.
    pub fn encode(&self, x: &ComplexSpectrogram, dropout: Option<Dropout>) -> Result<Tensor> {
        let (g, nodes) = self.run(x, dropout)?;
        Ok(g.value(nodes.euclidean).expect("evaluated").clone())
    }

    /// Maps Euclidean embeddings onto the ball (identity in Euclidean mode).
    pub fn embed(&self, euclidean: &Tensor) -> Result<Tensor> {
        match self.config.mode {
            MlrMode::Euclidean => Ok(euclidean.clone()),
            MlrMode::Hyperbolic => {
                let mut g = Graph::new();
                let e = g.constant(euclidean.clone());
                let z = g.exp0(e, self.config.curvature);
                Ok(g.evaluate(z, &Bindings::new())?.clone())
            }
        }
    }

    /// Parent and leaf masks plus embeddings.
    pub fn forward_masks(&self, x: &ComplexSpectrogram) -> Result<ForwardOutput> {
        self.forward_with(x, None)
    }

    pub fn forward_with(&self, x: &ComplexSpectrogram, dropout: Option<Dropout>) -> Result<ForwardOutput> {
        let (g, nodes) = self.run(x, dropout)?;
        let (t, f) = (x.frames, x.bins);
        let (kp, kl) = (self.hierarchy.parents.len(), self.hierarchy.leaves.len());
        let parent = g.value(nodes.parent_masks).expect("evaluated");
        let leaf = g.value(nodes.leaf_masks).expect("evaluated");
        let parent_masks = MaskTensor::from_bin_major(kp, t, f, parent.data())?;
        let mut leaf_masks = MaskTensor::from_bin_major(kl, t, f, leaf.data())?;
        if self.config.head_product {
            leaf_masks = self.compose_heads(&parent_masks, &leaf_masks);
        }
        Ok(ForwardOutput {
            parent_masks,
            leaf_masks,
            embeddings: g.value(nodes.embeddings).expect("evaluated").clone(),
        })
    }

    /// `parent mask × leaf softmax renormalized within the parent's children`.
    pub fn compose_heads(&self, parent: &MaskTensor, leaf: &MaskTensor) -> MaskTensor {
        let mut out = leaf.clone();
        let n = leaf.frames * leaf.bins;
        for (p, _) in self.hierarchy.parents.iter().enumerate() {
            let kids = self.hierarchy.children(p);
            for i in 0..n {
                let total: f64 = kids.iter().map(|k| leaf.class(*k)[i]).sum();
                for k in &kids {
                    let within = if total > 0.0 {
                        leaf.class(*k)[i] / total
                    } else {
                        1.0 / kids.len() as f64
                    };
                    out.class_mut(*k)[i] = parent.class(p)[i] * within;
                }
            }
        }
        out
    }
}
