use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{kernels, MlrMode, MIN_NORMAL_NORM};

use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for operations defined outside this module.
///
/// `backward` returns one optional gradient per input, each shaped like
/// that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone)]
enum Op {
    Param(String),
    Input(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Row(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    Exp0(NodeId, f64),
    Log0(NodeId, f64),
    MobiusAdd(NodeId, NodeId, f64),
    ConformalFactor(NodeId, f64),
    Distance(NodeId, NodeId, f64),
    Mlr {
        z: NodeId,
        p: NodeId,
        a: NodeId,
        c: f64,
        mode: MlrMode,
    },
    Custom(Arc<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Row(..) => "row",
            Op::Reshape(..) => "reshape",
            Op::Exp0(..) => "exp0",
            Op::Log0(..) => "log0",
            Op::MobiusAdd(..) => "mobius_add",
            Op::ConformalFactor(..) => "conformal_factor",
            Op::Distance(..) => "distance",
            Op::Mlr { .. } => "mlr_logits",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Input(_) | Op::Constant(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MobiusAdd(a, b, _)
            | Op::Distance(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Row(a, _)
            | Op::Reshape(a, _)
            | Op::Exp0(a, _)
            | Op::Log0(a, _)
            | Op::ConformalFactor(a, _) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) | Op::Custom(_, v) => v.clone(),
            Op::Mlr { z, p, a, .. } => vec![*z, *p, *a],
        }
    }
}

struct Node {
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Values for the `param` and `input` leaves of a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings(BTreeMap<String, Tensor>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }
}

/// Gradients of a scalar output with respect to every trainable leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet(BTreeMap<String, Tensor>);

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::Shape(format!("gradient `{name}` shape mismatch")));
                    }
                    mine.add_assign(g);
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}

/// A computation graph evaluated in reverse mode.
///
/// Nodes are appended in topological order, so every input of a node has a
/// smaller index. [`Graph::evaluate`] caches every forward value;
/// [`Graph::gradient`] then back-propagates a seed from any evaluated node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    // pre-clip row norms of ball-valued ops (0 when the row was not clipped)
    clip_norms: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

macro_rules! unary_builders {
    ($($fn_name:ident => $variant:ident),* $(,)?) => {
        $(
            pub fn $fn_name(&mut self, x: NodeId) -> NodeId {
                self.push(Op::$variant(x))
            }
        )*
    };
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Constant(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            requires_grad,
            label: None,
        });
        self.values.push(None);
        self.clip_norms.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable label used in diagnostics.
    pub fn label(&mut self, id: NodeId, label: &str) {
        self.nodes[id.0].label = Some(label.to_string());
    }

    /// Trainable leaf bound by name at evaluation time.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()))
    }

    /// Non-trainable leaf bound by name at evaluation time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(x, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    unary_builders! {
        tanh => Tanh,
        sigmoid => Sigmoid,
        exp => Exp,
        log => Log,
        abs => Abs,
        softmax => Softmax,
        log_softmax => LogSoftmax,
        sum => Sum,
        mean => Mean,
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(x, lo, hi))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Row `r` of a matrix, as a `1 x cols` matrix.
    pub fn row(&mut self, x: NodeId, r: usize) -> NodeId {
        self.push(Op::Row(x, r))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    /// Row-wise exponential map at the origin, clipped into the ball.
    pub fn exp0(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Exp0(x, c))
    }

    /// Row-wise logarithmic map at the origin.
    pub fn log0(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Log0(x, c))
    }

    /// Row-wise Möbius addition, clipped into the ball.
    pub fn mobius_add(&mut self, x: NodeId, y: NodeId, c: f64) -> NodeId {
        self.push(Op::MobiusAdd(x, y, c))
    }

    /// Row-wise conformal factor; output is `rows x 1`.
    pub fn conformal_factor(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::ConformalFactor(x, c))
    }

    /// Row-wise geodesic distance; output is `rows x 1`.
    pub fn distance(&mut self, x: NodeId, y: NodeId, c: f64) -> NodeId {
        self.push(Op::Distance(x, y, c))
    }

    /// MLR logits of embeddings `z` (`N x L`) against hyperplanes with
    /// offsets `p` and normals `a` (both `K x L`); output is `N x K`.
    pub fn mlr_logits(&mut self, z: NodeId, p: NodeId, a: NodeId, c: f64, mode: MlrMode) -> NodeId {
        self.push(Op::Mlr { z, p, a, c, mode })
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> NodeId {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// Cached forward value of an evaluated node.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::Constant(t) => Some(t),
            _ => self.values[id.0].as_ref(),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.value(id).expect("inputs are evaluated before their consumers")
    }

    /// Runs the forward pass for every node up to and including `output`.
    pub fn evaluate(&mut self, output: NodeId, bindings: &Bindings) -> Result<&Tensor> {
        self.evaluate_layered(output, &[bindings])
    }

    /// Like [`Graph::evaluate`], resolving each leaf in the first binding set
    /// that defines it.
    pub fn evaluate_layered(&mut self, output: NodeId, layers: &[&Bindings]) -> Result<&Tensor> {
        for i in 0..=output.0 {
            let (value, clip) = self.forward_node(i, layers)?;
            if let Some(v) = &value {
                if !v.is_finite() {
                    let node = &self.nodes[i];
                    return Err(Error::NumericFailure {
                        node: i,
                        op: node.op.name(),
                        label: node.label.as_ref().map(|l| format!(" `{l}`")).unwrap_or_default(),
                    });
                }
            }
            self.values[i] = value;
            self.clip_norms[i] = clip;
        }
        Ok(self.val(output))
    }

    fn forward_node(&self, i: usize, layers: &[&Bindings]) -> Result<(Option<Tensor>, Option<Vec<f64>>)> {
        let op = &self.nodes[i].op;
        let out = match op {
            Op::Constant(_) => return Ok((None, None)),
            Op::Param(name) | Op::Input(name) => layers
                .iter()
                .find_map(|b| b.get(name))
                .cloned()
                .ok_or_else(|| Error::Unbound(name.clone()))?,
            Op::Add(a, b) => zip_same(self.val(*a), self.val(*b), "add", |x, y| x + y)?,
            Op::Sub(a, b) => zip_same(self.val(*a), self.val(*b), "sub", |x, y| x - y)?,
            Op::Mul(a, b) => zip_same(self.val(*a), self.val(*b), "mul", |x, y| x * y)?,
            Op::AddRow(x, r) => {
                let (x, r) = (self.val(*x), self.val(*r));
                let cols = x.cols();
                if r.len() != cols {
                    return Err(Error::Shape(format!(
                        "add_row: row of {} elements for {} columns",
                        r.len(),
                        cols
                    )));
                }
                let mut out = x.clone();
                for chunk in out.data_mut().chunks_mut(cols) {
                    for (o, b) in chunk.iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(x, k) => map(self.val(*x), |v| v * k),
            Op::MatMul(a, b) => matmul_forward(self.val(*a), self.val(*b))?,
            Op::Tanh(x) => map(self.val(*x), f64::tanh),
            Op::Sigmoid(x) => map(self.val(*x), |v| 1.0 / (1.0 + (-v).exp())),
            Op::Exp(x) => map(self.val(*x), f64::exp),
            Op::Log(x) => map(self.val(*x), f64::ln),
            Op::Abs(x) => map(self.val(*x), f64::abs),
            Op::Clamp(x, lo, hi) => map(self.val(*x), |v| v.clamp(*lo, *hi)),
            Op::Softmax(x) => softmax_rows(self.val(*x), false),
            Op::LogSoftmax(x) => softmax_rows(self.val(*x), true),
            Op::Sum(x) => Tensor::scalar(self.val(*x).data().iter().sum()),
            Op::Mean(x) => {
                let t = self.val(*x);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::ConcatRows(parts) => {
                let first = self.val(parts[0]);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.val(*p);
                    if t.cols() != cols {
                        return Err(Error::Shape("concat_rows: column mismatch".into()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            Op::ConcatCols(parts) => {
                let rows = self.val(parts[0]).rows();
                let widths: Vec<usize> = parts.iter().map(|p| self.val(*p).cols()).collect();
                if parts.iter().any(|p| self.val(*p).rows() != rows) {
                    return Err(Error::Shape("concat_cols: row mismatch".into()));
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.val(*p).row(r));
                    }
                }
                Tensor::matrix(rows, total, data)?
            }
            Op::Row(x, r) => {
                let t = self.val(*x);
                if *r >= t.rows() {
                    return Err(Error::Shape(format!("row {r} out of {}", t.rows())));
                }
                Tensor::matrix(1, t.cols(), t.row(*r).to_vec())?
            }
            Op::Reshape(x, shape) => self.val(*x).clone().reshape(shape)?,
            Op::Exp0(x, c) => {
                let t = self.val(*x);
                let mut out = Tensor::zeros(t.shape());
                let cols = t.cols();
                let mut clips = vec![0.0; t.rows()];
                for (r, (o, v)) in out.data_mut().chunks_mut(cols).zip(t.data().chunks(cols)).enumerate() {
                    kernels::exp0(v, *c, o);
                    if let Some(n) = kernels::project_in_place(o, *c) {
                        clips[r] = n;
                    }
                }
                return Ok((Some(out), Some(clips)));
            }
            Op::Log0(x, c) => {
                let t = self.val(*x);
                let cols = t.cols();
                let mut out = Tensor::zeros(t.shape());
                for (o, v) in out.data_mut().chunks_mut(cols).zip(t.data().chunks(cols)) {
                    let inside = c * kernels::norm_sq(v);
                    if inside >= 1.0 {
                        return Err(Error::OutsideBall(inside));
                    }
                    kernels::log0(v, *c, o);
                }
                out
            }
            Op::MobiusAdd(x, y, c) => {
                let (tx, ty) = (self.val(*x), self.val(*y));
                if tx.shape() != ty.shape() {
                    return Err(Error::Shape("mobius_add: operand shapes differ".into()));
                }
                let cols = tx.cols();
                let mut out = Tensor::zeros(tx.shape());
                let mut clips = vec![0.0; tx.rows()];
                for (r, o) in out.data_mut().chunks_mut(cols).enumerate() {
                    kernels::mobius_add(tx.row(r), ty.row(r), *c, o);
                    if let Some(n) = kernels::project_in_place(o, *c) {
                        clips[r] = n;
                    }
                }
                return Ok((Some(out), Some(clips)));
            }
            Op::ConformalFactor(x, c) => {
                let t = self.val(*x);
                let data = (0..t.rows()).map(|r| kernels::conformal_factor(t.row(r), *c)).collect();
                Tensor::matrix(t.rows(), 1, data)?
            }
            Op::Distance(x, y, c) => {
                let (tx, ty) = (self.val(*x), self.val(*y));
                if tx.shape() != ty.shape() {
                    return Err(Error::Shape("distance: operand shapes differ".into()));
                }
                let data = (0..tx.rows())
                    .map(|r| kernels::distance(tx.row(r), ty.row(r), *c))
                    .collect();
                Tensor::matrix(tx.rows(), 1, data)?
            }
            Op::Mlr { z, p, a, c, mode } => mlr_forward(self.val(*z), self.val(*p), self.val(*a), *c, *mode)?,
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| self.val(*i)).collect();
                op.forward(&ins)?
            }
        };
        Ok((Some(out), None))
    }

    /// Back-propagates `seed` (shaped like the value of `output`) and returns
    /// the gradient of every `param` leaf. Leaves that share a name receive
    /// the sum of their gradients.
    pub fn gradient(&self, output: NodeId, seed: &Tensor) -> Result<GradientSet> {
        let out_val = self
            .value(output)
            .ok_or_else(|| Error::InvalidArgument("gradient requested before evaluate".into()))?;
        if out_val.shape() != seed.shape() && out_val.len() != seed.len() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone().reshape(out_val.shape())?);
        let mut result = GradientSet::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(name) = &self.nodes[i].op {
                match result.0.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        result.0.insert(name.clone(), g);
                    }
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }

        // Params that never received a gradient still get an explicit zero.
        for (node, value) in self.nodes[..=output.0].iter().zip(&self.values) {
            if let (Op::Param(name), Some(v)) = (&node.op, value) {
                if !result.0.contains_key(name) {
                    result.0.insert(name.clone(), Tensor::zeros(v.shape()));
                }
            }
        }
        Ok(result)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> Option<&'a mut Tensor> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.val(id).shape().to_vec();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.values[i].as_ref().expect("evaluated");
        match &self.nodes[i].op {
            Op::Param(_) | Op::Input(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).clone(), self.val(*b).clone());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(x, r) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    let cols = gr.len();
                    for chunk in g.data().chunks(cols) {
                        for (o, v) in gr.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += k * v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let vb = vb.clone();
                    let ga = self.acc(grads, *a).unwrap();
                    // ga += g (m x n) * b^T (n x k)
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        ga.data_mut(),
                    );
                }
                if self.nodes[b.0].requires_grad {
                    let va = va.clone();
                    let gb = self.acc(grads, *b).unwrap();
                    // gb += a^T (k x m) * g (m x n)
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        gb.data_mut(),
                    );
                }
            }
            Op::Tanh(x) => self.unary_backward(grads, *x, g, |_, y| 1.0 - y * y, out),
            Op::Sigmoid(x) => self.unary_backward(grads, *x, g, |_, y| y * (1.0 - y), out),
            Op::Exp(x) => self.unary_backward(grads, *x, g, |_, y| y, out),
            Op::Log(x) => self.unary_backward(grads, *x, g, |xv, _| 1.0 / xv, out),
            Op::Abs(x) => self.unary_backward(
                grads,
                *x,
                g,
                |xv, _| {
                    if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
                out,
            ),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_backward(
                    grads,
                    *x,
                    g,
                    move |xv, _| if xv >= lo && xv <= hi { 1.0 } else { 0.0 },
                    out,
                )
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = out.cols();
                    for ((o, y), gr) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(out.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            o[j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = out.cols();
                    for ((o, y), gr) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(out.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            o[j] += gr[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                let gv = g.data()[0] / n;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            let src = &g.data()[r * total + col..r * total + col + w];
                            for (o, v) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Row(x, r) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = g.len();
                    for (o, v) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::Reshape(x, _) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(g);
                }
            }
            Op::Exp0(x, c) => {
                let vx = self.val(*x).clone();
                let clips = self.clip_norms[i].as_ref().expect("exp0 records clip norms");
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = vx.cols();
                    let mut buf = vec![0.0; cols];
                    let mut raw = vec![0.0; cols];
                    for (r, &clip) in clips.iter().enumerate().take(vx.rows()) {
                        let v = vx.row(r);
                        buf.copy_from_slice(g.row(r));
                        if clip > 0.0 {
                            kernels::exp0(v, *c, &mut raw);
                            kernels::project_vjp_in_place(&raw, clip, *c, &mut buf);
                        }
                        kernels::exp0_vjp(v, *c, &buf, &mut gx.data_mut()[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Log0(x, c) => {
                let vx = self.val(*x).clone();
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = vx.cols();
                    for r in 0..vx.rows() {
                        kernels::log0_vjp(vx.row(r), *c, g.row(r), &mut gx.data_mut()[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::MobiusAdd(x, y, c) => {
                let (vx, vy) = (self.val(*x).clone(), self.val(*y).clone());
                let clips = self.clip_norms[i].as_ref().expect("mobius_add records clip norms");
                let cols = vx.cols();
                let mut gx_all = Tensor::zeros(vx.shape());
                let mut gy_all = Tensor::zeros(vy.shape());
                let mut buf = vec![0.0; cols];
                let mut raw = vec![0.0; cols];
                for (r, &clip) in clips.iter().enumerate().take(vx.rows()) {
                    buf.copy_from_slice(g.row(r));
                    if clip > 0.0 {
                        kernels::mobius_add(vx.row(r), vy.row(r), *c, &mut raw);
                        kernels::project_vjp_in_place(&raw, clip, *c, &mut buf);
                    }
                    let (gxr, gyr) = (
                        &mut gx_all.data_mut()[r * cols..(r + 1) * cols],
                        &mut gy_all.data_mut()[r * cols..(r + 1) * cols],
                    );
                    kernels::mobius_add_vjp(vx.row(r), vy.row(r), *c, &buf, gxr, gyr);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(&gx_all);
                }
                if let Some(gy) = self.acc(grads, *y) {
                    gy.add_assign(&gy_all);
                }
            }
            Op::ConformalFactor(x, c) => {
                let vx = self.val(*x).clone();
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = vx.cols();
                    for r in 0..vx.rows() {
                        let lam = out.data()[r];
                        let k = g.data()[r] * c * lam * lam;
                        for (o, xv) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(vx.row(r)) {
                            *o += k * xv;
                        }
                    }
                }
            }
            Op::Distance(x, y, c) => {
                let (vx, vy) = (self.val(*x).clone(), self.val(*y).clone());
                let cols = vx.cols();
                let mut gx_all = Tensor::zeros(vx.shape());
                let mut gy_all = Tensor::zeros(vy.shape());
                for r in 0..vx.rows() {
                    let (gxr, gyr) = (
                        &mut gx_all.data_mut()[r * cols..(r + 1) * cols],
                        &mut gy_all.data_mut()[r * cols..(r + 1) * cols],
                    );
                    kernels::distance_vjp(vx.row(r), vy.row(r), *c, g.data()[r], gxr, gyr);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(&gx_all);
                }
                if let Some(gy) = self.acc(grads, *y) {
                    gy.add_assign(&gy_all);
                }
            }
            Op::Mlr { z, p, a, c, mode } => {
                let (vz, vp, va) = (self.val(*z), self.val(*p), self.val(*a));
                let mut gz = Tensor::zeros(vz.shape());
                let mut gp = Tensor::zeros(vp.shape());
                let mut ga = Tensor::zeros(va.shape());
                mlr_backward(vz, vp, va, *c, *mode, g, &mut gz, &mut gp, &mut ga);
                for (id, gv) in [(*z, gz), (*p, gp), (*a, ga)] {
                    if let Some(t) = self.acc(grads, id) {
                        t.add_assign(&gv);
                    }
                }
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| self.val(*i)).collect();
                let gs = op.backward(&ins, out, g)?;
                for (id, gv) in inputs.iter().zip(gs) {
                    if let (Some(gv), true) = (gv, self.nodes[id.0].requires_grad) {
                        let t = self.acc(grads, *id).unwrap();
                        if t.len() != gv.len() {
                            return Err(Error::Shape(format!("{}: gradient shape mismatch", op.name())));
                        }
                        t.add_assign(&gv);
                    }
                }
            }
        }
        Ok(())
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Tensor>],
        x: NodeId,
        g: &Tensor,
        deriv: impl Fn(f64, f64) -> f64,
        out: &Tensor,
    ) {
        let vx = self.val(x).clone();
        if let Some(gx) = self.acc(grads, x) {
            for (((o, gv), xv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()).zip(out.data()) {
                *o += gv * deriv(*xv, *yv);
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn softmax_rows(t: &Tensor, log: bool) -> Tensor {
    let cols = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        if log {
            let lse = m + s.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
        }
    }
    out
}

/// `c += a * b` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe matrices that lie within the given slices
    // (checked above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        out.data_mut(),
    );
    Ok(out)
}

/// Per-hyperplane quantities shared by every embedding row.
struct PlaneConsts {
    pp: f64,
    pa: f64,
    na: f64,
    lambda: f64,
}

fn plane_consts(p: &[f64], a: &[f64], c: f64) -> Result<PlaneConsts> {
    let na = kernels::norm_sq(a).sqrt();
    if na < MIN_NORMAL_NORM {
        return Err(Error::DegenerateNormal(na));
    }
    let pp = kernels::norm_sq(p);
    Ok(PlaneConsts {
        pp,
        pa: kernels::dot(p, a),
        na,
        lambda: 2.0 / (1.0 - c * pp),
    })
}

fn check_mlr_shapes(z: &Tensor, p: &Tensor, a: &Tensor) -> Result<(usize, usize, usize)> {
    let l = z.cols();
    if p.cols() != l || a.cols() != l || p.rows() != a.rows() {
        return Err(Error::Shape(format!(
            "mlr_logits: z {:?}, p {:?}, a {:?}",
            z.shape(),
            p.shape(),
            a.shape()
        )));
    }
    Ok((z.rows(), p.rows(), l))
}

// The hyperbolic logit is evaluated in closed form from the scalars
// <z,p>, <z,a>, |z|^2 and per-plane constants, so no per-pair vectors are
// materialized. `kernels::hyperbolic_logit` is the vector-form reference.
fn mlr_forward(z: &Tensor, p: &Tensor, a: &Tensor, c: f64, mode: MlrMode) -> Result<Tensor> {
    let (n, k, _) = check_mlr_shapes(z, p, a)?;
    let mut consts = Vec::with_capacity(k);
    for j in 0..k {
        if mode == MlrMode::Hyperbolic {
            let inside = c * kernels::norm_sq(p.row(j));
            if inside >= 1.0 {
                return Err(Error::OutsideBall(inside));
            }
        }
        consts.push(plane_consts(p.row(j), a.row(j), c)?);
    }
    let sc = c.sqrt();
    let mut out = Tensor::zeros(&[n, k]);
    for r in 0..n {
        let zr = z.row(r);
        let zz = kernels::norm_sq(zr);
        for (j, pc) in consts.iter().enumerate() {
            let za = kernels::dot(zr, a.row(j));
            out.data_mut()[r * k + j] = match mode {
                MlrMode::Euclidean => 4.0 * (za - pc.pa),
                MlrMode::Hyperbolic => {
                    let zp = kernels::dot(zr, p.row(j));
                    let xy = -zp;
                    let am = 1.0 + 2.0 * c * xy + c * zz;
                    let bm = 1.0 - c * pc.pp;
                    let dm = 1.0 + 2.0 * c * xy + c * c * pc.pp * zz;
                    let s = (-am * pc.pa + bm * za) / dm;
                    let u2 = (am * am * pc.pp + 2.0 * am * bm * xy + bm * bm * zz) / (dm * dm);
                    let q = 1.0 - c * u2;
                    let arg = 2.0 * sc * s / (q * pc.na);
                    pc.lambda * pc.na / sc * arg.asinh()
                }
            };
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn mlr_backward(
    z: &Tensor,
    p: &Tensor,
    a: &Tensor,
    c: f64,
    mode: MlrMode,
    g: &Tensor,
    gz: &mut Tensor,
    gp: &mut Tensor,
    ga: &mut Tensor,
) {
    let (n, k, l) = (z.rows(), p.rows(), z.cols());
    let consts: Vec<PlaneConsts> = (0..k)
        .map(|j| plane_consts(p.row(j), a.row(j), c).expect("validated in forward"))
        .collect();
    let sc = c.sqrt();
    // Coefficients of the p- and a-gradients on z are accumulated per plane,
    // then applied once: gp_j += sum_r (coef * z_r) etc.
    let mut gp_coef_a = vec![0.0; k];
    let mut gp_coef_p = vec![0.0; k];
    let mut ga_coef_a = vec![0.0; k];
    let mut ga_coef_p = vec![0.0; k];
    let mut gp_z = vec![0.0; k * l];
    let mut ga_z = vec![0.0; k * l];

    for r in 0..n {
        let zr = z.row(r);
        let zz = kernels::norm_sq(zr);
        let mut gz_row = vec![0.0; l];
        for j in 0..k {
            let gv = g.data()[r * k + j];
            if gv == 0.0 {
                continue;
            }
            let pc = &consts[j];
            let (pj, aj) = (p.row(j), a.row(j));
            match mode {
                MlrMode::Euclidean => {
                    for i in 0..l {
                        gz_row[i] += 4.0 * gv * aj[i];
                        ga_z[j * l + i] += 4.0 * gv * zr[i];
                    }
                    gp_coef_a[j] -= 4.0 * gv;
                    ga_coef_p[j] -= 4.0 * gv;
                }
                MlrMode::Hyperbolic => {
                    let za = kernels::dot(zr, aj);
                    let zp = kernels::dot(zr, pj);
                    // x = -p, y = z in the Möbius sum u = x ⊕ y
                    let xy = -zp;
                    let x2 = pc.pp;
                    let y2 = zz;
                    let am = 1.0 + 2.0 * c * xy + c * y2;
                    let bm = 1.0 - c * x2;
                    let dm = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
                    let s = (-am * pc.pa + bm * za) / dm;
                    let u2 = (am * am * x2 + 2.0 * am * bm * xy + bm * bm * y2) / (dm * dm);
                    let q = 1.0 - c * u2;
                    let arg = 2.0 * sc * s / (q * pc.na);

                    let k1 = pc.lambda * pc.na / sc;
                    let g_arg = gv * k1 / (1.0 + arg * arg).sqrt();
                    let g_k1 = gv * arg.asinh();
                    let darg_ds = 2.0 * sc / (q * pc.na);
                    let darg_du2 = 2.0 * sc * s / pc.na * c / (q * q);
                    let darg_dna = -arg / pc.na;

                    // gu = alpha a + beta u
                    let alpha = g_arg * darg_ds;
                    let beta = g_arg * darg_du2 * 2.0;
                    let ux = (am * x2 + bm * xy) / dm;
                    let uy = (am * xy + bm * y2) / dm;
                    let gux = alpha * (-pc.pa) + beta * ux;
                    let guy = alpha * za + beta * uy;
                    let gn_x = gux / dm;
                    let gn_y = guy / dm;
                    let g_d = -(am * gn_x + bm * gn_y) / dm;
                    let g_xy = 2.0 * c * (gn_x + g_d);
                    let g_x2 = -c * gn_y + c * c * y2 * g_d;
                    let g_y2 = c * gn_x + c * c * x2 * g_d;

                    let d2 = dm * dm;
                    // gy = (B alpha/D) a + (A B beta/D^2 + g_xy) x + (B^2 beta/D^2 + 2 g_y2) y
                    let cy_a = bm * alpha / dm;
                    let cy_x = am * bm * beta / d2 + g_xy;
                    let cy_y = bm * bm * beta / d2 + 2.0 * g_y2;
                    // gx = (A alpha/D) a + (A^2 beta/D^2 + 2 g_x2) x + (A B beta/D^2 + g_xy) y
                    let cx_a = am * alpha / dm;
                    let cx_x = am * am * beta / d2 + 2.0 * g_x2;
                    let cx_y = am * bm * beta / d2 + g_xy;

                    for i in 0..l {
                        gz_row[i] += cy_a * aj[i] - cy_x * pj[i] + cy_y * zr[i];
                    }
                    // gp = -gx + g_lambda c λ^2 p, with x = -p
                    let g_lambda = g_k1 * pc.na / sc;
                    gp_coef_a[j] += -cx_a;
                    gp_coef_p[j] += cx_x + g_lambda * c * pc.lambda * pc.lambda;
                    for i in 0..l {
                        gp_z[j * l + i] -= cx_y * zr[i];
                    }
                    // ga = (alpha/D)(A x + B y) + (g_na/|a|) a
                    let g_na = g_k1 * pc.lambda / sc + g_arg * darg_dna;
                    ga_coef_a[j] += g_na / pc.na;
                    ga_coef_p[j] += -alpha * am / dm;
                    for i in 0..l {
                        ga_z[j * l + i] += alpha * bm / dm * zr[i];
                    }
                }
            }
        }
        for (o, v) in gz.data_mut()[r * l..(r + 1) * l].iter_mut().zip(&gz_row) {
            *o += v;
        }
    }

    for j in 0..k {
        let (pj, aj) = (p.row(j), a.row(j));
        for i in 0..l {
            gp.data_mut()[j * l + i] += gp_coef_a[j] * aj[i] + gp_coef_p[j] * pj[i] + gp_z[j * l + i];
            ga.data_mut()[j * l + i] += ga_coef_a[j] * aj[i] + ga_coef_p[j] * pj[i] + ga_z[j * l + i];
        }
    }
}
