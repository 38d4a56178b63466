//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only DAG: every node is declared after its
//! parents, so node order is a topological order. Values and gradients are
//! stored in per-node slots that are overwritten on each evaluation; the
//! topology itself never changes after construction. Gradient accumulation
//! walks nodes in reverse declaration order and visits parents in declaration
//! order, which makes backward passes bit-reproducible.
//!
//! Training code binds parameters as named inputs and asks for gradients with
//! respect to them; the same graph instance is rebound and re-evaluated for
//! every batch item. One instance is single-threaded; clone it for parallel
//! evaluation.

use crate::matrix::DenseMatrix;
use std::collections::HashMap;
use thiserror::Error;

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("degenerate row norm at node {node} (row {row})")]
    DegenerateNorm { node: String, row: usize },
    #[error("gradient root must be 1x1, node {node} is {rows}x{cols}")]
    NonScalarRoot { node: String, rows: usize, cols: usize },
    #[error("gather index out of range at node {node}: {index} >= {rows}")]
    GatherOutOfRange { node: String, index: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Operation kinds. `NormalizeRows`, `Clamp` and `GatherRows` extend the
/// minimal set: row L2 normalization feeds the projection head, clamping
/// stabilizes discriminator log terms, and gathers apply index permutations
/// to flattened weight vectors inside a differentiable path.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { name: String },
    Matmul,
    /// Elementwise add, or row-broadcast add when the second parent is 1xN.
    Add,
    Scale(f64),
    Activation(Activation),
    /// Row-wise standardization (zero mean, unit variance, eps 1e-5), no
    /// learned affine; affine freedom is absorbed by adjacent linear layers.
    LayerNorm,
    SoftmaxRows,
    Transpose,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    /// Mean over all entries, producing 1x1.
    ReduceMean,
    /// Mean of squared differences over all entries, producing 1x1.
    MseLoss,
    /// Parents: logits (BxK), targets (BxK, one-hot rows). Mean over rows of
    /// -sum_j target_j * log softmax(logits)_j, with row-max subtraction.
    CrossEntropyLoss,
    Log,
    Sigmoid,
    /// Row-wise L2 normalization; rows with norm < 1e-12 are an error.
    NormalizeRows,
    Clamp { lo: f64, hi: f64 },
    /// Parents: source (RxC), indices (Sx1, values rounded to row numbers).
    /// Output row i is source row indices[i]. Indices receive zero gradient.
    GatherRows,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Activation(Activation::Gelu) => "gelu",
            Op::Activation(Activation::Relu) => "relu",
            Op::LayerNorm => "layer-norm",
            Op::SoftmaxRows => "softmax-rows",
            Op::Transpose => "transpose",
            Op::ConcatRows => "concat-rows",
            Op::SliceRows { .. } => "slice-rows",
            Op::ReduceMean => "reduce-mean",
            Op::MseLoss => "mse-loss",
            Op::CrossEntropyLoss => "cross-entropy-loss",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::NormalizeRows => "normalize-rows",
            Op::Clamp { .. } => "clamp",
            Op::GatherRows => "gather-rows",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    rows: usize,
    cols: usize,
}

/// GELU, tanh approximation with the usual fixed constants.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Analytic derivative of the tanh-approximate GELU.
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    values: Vec<DenseMatrix>,
    grads: Vec<DenseMatrix>,
    bound: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), inputs: HashMap::new(), values: Vec::new(), grads: Vec::new(), bound: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn node_label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Input { name } => format!("#{} input `{}`", id.0, name),
            op => format!("#{} {}", id.0, op.kind()),
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, rows: usize, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, parents, rows, cols });
        self.values.push(DenseMatrix::zeros(rows, cols));
        self.grads.push(DenseMatrix::zeros(rows, cols));
        self.bound.push(false);
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    fn mismatch(&self, id: NodeId, detail: String) -> GraphError {
        GraphError::ShapeMismatch { node: self.node_label(id), detail }
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        assert!(!self.inputs.contains_key(name), "duplicate input name `{name}`");
        let id = self.push(Op::Input { name: name.to_string() }, vec![], rows, cols);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let id = self.push(Op::Matmul, vec![a, b], ar, bc);
        if ac != br {
            return Err(self.mismatch(id, format!("{ar}x{ac} @ {br}x{bc}")));
        }
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let id = self.push(Op::Add, vec![a, b], ar, ac);
        let broadcast = br == 1 && bc == ac && ar >= 1;
        if !( (ar, ac) == (br, bc) || broadcast ) {
            return Err(self.mismatch(id, format!("{ar}x{ac} + {br}x{bc}")));
        }
        Ok(id)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(factor), vec![a], r, c)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Activation(act), vec![a], r, c)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::LayerNorm, vec![a], r, c)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::SoftmaxRows, vec![a], r, c)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose, vec![a], c, r)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        assert!(!parts.is_empty(), "concat-rows needs at least one parent");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let id = self.push(Op::ConcatRows, parts.to_vec(), rows, cols);
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(self.mismatch(id, format!("column mismatch: {} vs {cols}", self.shape(*p).1)));
            }
        }
        Ok(id)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        let (r, c) = self.shape(a);
        let id = self.push(Op::SliceRows { start, end }, vec![a], end.saturating_sub(start), c);
        if start >= end || end > r {
            return Err(self.mismatch(id, format!("slice {start}..{end} of {r} rows")));
        }
        Ok(id)
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMean, vec![a], 1, 1)
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let id = self.push(Op::MseLoss, vec![a, b], 1, 1);
        if sa != sb {
            return Err(self.mismatch(id, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(id)
    }

    pub fn cross_entropy_loss(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId, GraphError> {
        let sl = self.shape(logits);
        let st = self.shape(targets);
        let id = self.push(Op::CrossEntropyLoss, vec![logits, targets], 1, 1);
        if sl != st {
            return Err(self.mismatch(id, format!("logits {}x{} vs targets {}x{}", sl.0, sl.1, st.0, st.1)));
        }
        Ok(id)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Log, vec![a], r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid, vec![a], r, c)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::NormalizeRows, vec![a], r, c)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Clamp { lo, hi }, vec![a], r, c)
    }

    pub fn gather_rows(&mut self, src: NodeId, indices: NodeId, out_rows: usize) -> Result<NodeId, GraphError> {
        let (_, c) = self.shape(src);
        let (ir, ic) = self.shape(indices);
        let id = self.push(Op::GatherRows, vec![src, indices], out_rows, c);
        if ic != 1 || ir != out_rows {
            return Err(self.mismatch(id, format!("indices must be {out_rows}x1, got {ir}x{ic}")));
        }
        Ok(id)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn set_input(&mut self, name: &str, value: DenseMatrix) -> Result<(), GraphError> {
        let id = *self.inputs.get(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        let (r, c) = self.shape(id);
        if value.shape() != (r, c) {
            return Err(self.mismatch(id, format!("bound {}x{}, declared {r}x{c}", value.rows(), value.cols())));
        }
        self.values[id.0] = value;
        self.bound[id.0] = true;
        Ok(())
    }

    /// Copies `value` into the input slot without reallocating.
    pub fn set_input_from(&mut self, name: &str, value: &DenseMatrix) -> Result<(), GraphError> {
        let id = *self.inputs.get(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        let (r, c) = self.shape(id);
        if value.shape() != (r, c) {
            return Err(self.mismatch(id, format!("bound {}x{}, declared {r}x{c}", value.rows(), value.cols())));
        }
        self.values[id.0].values_mut().copy_from_slice(value.values());
        self.bound[id.0] = true;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &DenseMatrix {
        &self.grads[id.0]
    }

    /// Forward pass up to and including `root`; returns the root value.
    /// Deterministic for fixed bindings: all loops run in declaration order.
    pub fn evaluate(&mut self, root: NodeId) -> Result<&DenseMatrix, GraphError> {
        for i in 0..=root.0 {
            if let Op::Input { name } = &self.nodes[i].op {
                if !self.bound[i] {
                    return Err(GraphError::UnboundInput(name.clone()));
                }
                continue;
            }
            self.compute_node(i)?;
            if !self.values[i].is_finite() {
                return Err(GraphError::NonFinite { node: self.node_label(NodeId(i)) });
            }
        }
        Ok(&self.values[root.0])
    }

    fn compute_node(&mut self, i: usize) -> Result<(), GraphError> {
        let (before, rest) = self.values.split_at_mut(i);
        let out = &mut rest[0];
        let node = &self.nodes[i];
        let p = |k: usize| -> &DenseMatrix { &before[node.parents[k].0] };
        match &node.op {
            Op::Input { .. } => unreachable!(),
            Op::Matmul => {
                let a = p(0);
                let b = p(1);
                let n = b.cols();
                let ov = out.values_mut();
                ov.fill(0.0);
                for r in 0..a.rows() {
                    let a_row = a.row(r);
                    let o_row = &mut ov[r * n..(r + 1) * n];
                    for (k, &av) in a_row.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let b_row = b.row(k);
                        for j in 0..n {
                            o_row[j] += av * b_row[j];
                        }
                    }
                }
            }
            Op::Add => {
                let a = p(0);
                let b = p(1);
                let ov = out.values_mut();
                if a.shape() == b.shape() {
                    for (o, (x, y)) in ov.iter_mut().zip(a.values().iter().zip(b.values())) {
                        *o = x + y;
                    }
                } else {
                    let cols = a.cols();
                    let bias = b.values();
                    for r in 0..a.rows() {
                        let a_row = a.row(r);
                        let o_row = &mut ov[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            o_row[j] = a_row[j] + bias[j];
                        }
                    }
                }
            }
            Op::Scale(f) => {
                let f = *f;
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = x * f;
                }
            }
            Op::Activation(Activation::Gelu) => {
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = gelu(*x);
                }
            }
            Op::Activation(Activation::Relu) => {
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = x.max(0.0);
                }
            }
            Op::LayerNorm => {
                let a = p(0);
                let cols = a.cols();
                let ov = out.values_mut();
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let o_row = &mut ov[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        o_row[j] = (row[j] - mean) * inv;
                    }
                }
            }
            Op::SoftmaxRows => {
                let a = p(0);
                let cols = a.cols();
                let ov = out.values_mut();
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let o_row = &mut ov[r * cols..(r + 1) * cols];
                    let mut sum = 0.0;
                    for j in 0..cols {
                        let e = (row[j] - max).exp();
                        o_row[j] = e;
                        sum += e;
                    }
                    for v in o_row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
            Op::Transpose => {
                let a = p(0);
                let (r0, c0) = a.shape();
                let ov = out.values_mut();
                let av = a.values();
                for r in 0..r0 {
                    for c in 0..c0 {
                        ov[c * r0 + r] = av[r * c0 + c];
                    }
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let parents = node.parents.clone();
                let ov = out.values_mut();
                for pid in &parents {
                    let part = &before[pid.0];
                    ov[offset..offset + part.len()].copy_from_slice(part.values());
                    offset += part.len();
                }
            }
            Op::SliceRows { start, end } => {
                let a = p(0);
                let cols = a.cols();
                out.values_mut().copy_from_slice(&a.values()[start * cols..end * cols]);
            }
            Op::ReduceMean => {
                let a = p(0);
                out.values_mut()[0] = a.values().iter().sum::<f64>() / a.len() as f64;
            }
            Op::MseLoss => {
                let a = p(0);
                let b = p(1);
                let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
                out.values_mut()[0] = sum / a.len() as f64;
            }
            Op::CrossEntropyLoss => {
                let logits = p(0);
                let targets = p(1);
                let cols = logits.cols();
                let mut total = 0.0;
                for r in 0..logits.rows() {
                    let row = logits.row(r);
                    let t_row = targets.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    for j in 0..cols {
                        let log_p = row[j] - max - log_sum;
                        total -= t_row[j] * log_p;
                    }
                }
                out.values_mut()[0] = total / logits.rows() as f64;
            }
            Op::Log => {
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = x.ln();
                }
            }
            Op::Sigmoid => {
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = 1.0 / (1.0 + (-x).exp());
                }
            }
            Op::NormalizeRows => {
                let a = p(0);
                let cols = a.cols();
                let ov = out.values_mut();
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < NORMALIZE_MIN_NORM {
                        let label = self.node_label(NodeId(i));
                        return Err(GraphError::DegenerateNorm { node: label, row: r });
                    }
                    let o_row = &mut ov[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        o_row[j] = row[j] / norm;
                    }
                }
            }
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let a = p(0);
                for (o, x) in out.values_mut().iter_mut().zip(a.values()) {
                    *o = x.clamp(lo, hi);
                }
            }
            Op::GatherRows => {
                let src = p(0);
                let idx = p(1);
                let cols = src.cols();
                let rows = src.rows();
                let ov = out.values_mut();
                for (r, &raw) in idx.values().iter().enumerate() {
                    let k = raw.round() as usize;
                    if k >= rows {
                        let label = self.node_label(NodeId(i));
                        return Err(GraphError::GatherOutOfRange { node: label, index: k, rows });
                    }
                    ov[r * cols..(r + 1) * cols].copy_from_slice(&src.values()[k * cols..(k + 1) * cols]);
                }
            }
        }
        Ok(())
    }

    /// Reverse accumulation seeded at a scalar root. Call after `evaluate`.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(GraphError::NonScalarRoot { node: self.node_label(root), rows: r, cols: c });
        }
        for g in self.grads.iter_mut() {
            g.values_mut().fill(0.0);
        }
        self.grads[root.0].values_mut()[0] = 1.0;
        for i in (0..=root.0).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        if matches!(self.nodes[i].op, Op::Input { .. }) {
            return;
        }
        let (gbefore, grest) = self.grads.split_at_mut(i);
        let dout = &grest[0];
        if dout.values().iter().all(|v| *v == 0.0) {
            return;
        }
        let node = &self.nodes[i];
        let values = &self.values;
        let pv = |k: usize| -> &DenseMatrix { &values[node.parents[k].0] };
        match &node.op {
            Op::Input { .. } => unreachable!(),
            Op::Matmul => {
                let a = pv(0);
                let b = pv(1);
                // dA += dOut @ B^T
                {
                    let da = &mut gbefore[node.parents[0].0];
                    let n = b.cols();
                    for r in 0..a.rows() {
                        let d_row = dout.row(r);
                        let da_row = &mut da.values_mut()[r * a.cols()..(r + 1) * a.cols()];
                        for k in 0..a.cols() {
                            let b_row = &b.values()[k * n..(k + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += d_row[j] * b_row[j];
                            }
                            da_row[k] += acc;
                        }
                    }
                }
                // dB += A^T @ dOut
                {
                    let db = &mut gbefore[node.parents[1].0];
                    let n = b.cols();
                    for r in 0..a.rows() {
                        let a_row = a.row(r);
                        let d_row = dout.row(r);
                        for (k, &av) in a_row.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let db_row = &mut db.values_mut()[k * n..(k + 1) * n];
                            for j in 0..n {
                                db_row[j] += av * d_row[j];
                            }
                        }
                    }
                }
            }
            Op::Add => {
                let a_shape = values[node.parents[0].0].shape();
                let b_shape = values[node.parents[1].0].shape();
                {
                    let da = &mut gbefore[node.parents[0].0];
                    for (g, d) in da.values_mut().iter_mut().zip(dout.values()) {
                        *g += d;
                    }
                }
                {
                    let db = &mut gbefore[node.parents[1].0];
                    if a_shape == b_shape {
                        for (g, d) in db.values_mut().iter_mut().zip(dout.values()) {
                            *g += d;
                        }
                    } else {
                        let cols = a_shape.1;
                        let gb = db.values_mut();
                        for r in 0..a_shape.0 {
                            let d_row = &dout.values()[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                gb[j] += d_row[j];
                            }
                        }
                    }
                }
            }
            Op::Scale(f) => {
                let f = *f;
                let da = &mut gbefore[node.parents[0].0];
                for (g, d) in da.values_mut().iter_mut().zip(dout.values()) {
                    *g += f * d;
                }
            }
            Op::Activation(Activation::Gelu) => {
                let x = pv(0);
                let da = &mut gbefore[node.parents[0].0];
                for ((g, d), xv) in da.values_mut().iter_mut().zip(dout.values()).zip(x.values()) {
                    *g += gelu_prime(*xv) * d;
                }
            }
            Op::Activation(Activation::Relu) => {
                let x = pv(0);
                let da = &mut gbefore[node.parents[0].0];
                for ((g, d), xv) in da.values_mut().iter_mut().zip(dout.values()).zip(x.values()) {
                    if *xv > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::LayerNorm => {
                let x = pv(0);
                let y = &values[i];
                let cols = x.cols();
                let da = &mut gbefore[node.parents[0].0];
                for r in 0..x.rows() {
                    let x_row = x.row(r);
                    let y_row = y.row(r);
                    let d_row = dout.row(r);
                    let mean = x_row.iter().sum::<f64>() / cols as f64;
                    let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mean_d = d_row.iter().sum::<f64>() / cols as f64;
                    let mean_dy: f64 =
                        d_row.iter().zip(y_row).map(|(d, yv)| d * yv).sum::<f64>() / cols as f64;
                    let g_row = &mut da.values_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        g_row[j] += inv * (d_row[j] - mean_d - y_row[j] * mean_dy);
                    }
                }
            }
            Op::SoftmaxRows => {
                let y = &values[i];
                let cols = y.cols();
                let da = &mut gbefore[node.parents[0].0];
                for r in 0..y.rows() {
                    let y_row = y.row(r);
                    let d_row = dout.row(r);
                    let dotp: f64 = y_row.iter().zip(d_row).map(|(yv, d)| yv * d).sum();
                    let g_row = &mut da.values_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        g_row[j] += y_row[j] * (d_row[j] - dotp);
                    }
                }
            }
            Op::Transpose => {
                let da = &mut gbefore[node.parents[0].0];
                let (r0, c0) = da.shape();
                let gv = da.values_mut();
                let dv = dout.values();
                for r in 0..r0 {
                    for c in 0..c0 {
                        gv[r * c0 + c] += dv[c * r0 + r];
                    }
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let parents = node.parents.clone();
                for pid in &parents {
                    let dp = &mut gbefore[pid.0];
                    let len = dp.len();
                    for (g, d) in dp.values_mut().iter_mut().zip(&dout.values()[offset..offset + len]) {
                        *g += d;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { start, .. } => {
                let da = &mut gbefore[node.parents[0].0];
                let cols = da.cols();
                let base = start * cols;
                for (k, d) in dout.values().iter().enumerate() {
                    da.values_mut()[base + k] += d;
                }
            }
            Op::ReduceMean => {
                let d = dout.values()[0];
                let da = &mut gbefore[node.parents[0].0];
                let inv = d / da.len() as f64;
                for g in da.values_mut() {
                    *g += inv;
                }
            }
            Op::MseLoss => {
                let d = dout.values()[0];
                let a = pv(0);
                let b = pv(1);
                let inv = 2.0 * d / a.len() as f64;
                {
                    let da = &mut gbefore[node.parents[0].0];
                    for ((g, x), y) in da.values_mut().iter_mut().zip(a.values()).zip(b.values()) {
                        *g += inv * (x - y);
                    }
                }
                {
                    let db = &mut gbefore[node.parents[1].0];
                    for ((g, x), y) in db.values_mut().iter_mut().zip(a.values()).zip(b.values()) {
                        *g -= inv * (x - y);
                    }
                }
            }
            Op::CrossEntropyLoss => {
                let d = dout.values()[0];
                let logits = pv(0);
                let targets = pv(1);
                let cols = logits.cols();
                let rows = logits.rows() as f64;
                for r in 0..logits.rows() {
                    let row = logits.row(r);
                    let t_row = targets.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut sum = 0.0;
                    let mut probs = vec![0.0; cols];
                    for j in 0..cols {
                        probs[j] = (row[j] - max).exp();
                        sum += probs[j];
                    }
                    for p in probs.iter_mut() {
                        *p /= sum;
                    }
                    let t_sum: f64 = t_row.iter().sum();
                    let log_sum = sum.ln();
                    {
                        let dl = &mut gbefore[node.parents[0].0];
                        let g_row = &mut dl.values_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            g_row[j] += d * (probs[j] * t_sum - t_row[j]) / rows;
                        }
                    }
                    {
                        let dt = &mut gbefore[node.parents[1].0];
                        let g_row = &mut dt.values_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let log_p = row[j] - max - log_sum;
                            g_row[j] -= d * log_p / rows;
                        }
                    }
                }
            }
            Op::Log => {
                let x = pv(0);
                let da = &mut gbefore[node.parents[0].0];
                for ((g, d), xv) in da.values_mut().iter_mut().zip(dout.values()).zip(x.values()) {
                    *g += d / xv;
                }
            }
            Op::Sigmoid => {
                let y = &values[i];
                let da = &mut gbefore[node.parents[0].0];
                for ((g, d), yv) in da.values_mut().iter_mut().zip(dout.values()).zip(y.values()) {
                    *g += d * yv * (1.0 - yv);
                }
            }
            Op::NormalizeRows => {
                let x = pv(0);
                let y = &values[i];
                let cols = x.cols();
                let da = &mut gbefore[node.parents[0].0];
                for r in 0..x.rows() {
                    let x_row = x.row(r);
                    let y_row = y.row(r);
                    let d_row = dout.row(r);
                    let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dotp: f64 = y_row.iter().zip(d_row).map(|(yv, d)| yv * d).sum();
                    let g_row = &mut da.values_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        g_row[j] += (d_row[j] - y_row[j] * dotp) / norm;
                    }
                }
            }
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let x = pv(0);
                let da = &mut gbefore[node.parents[0].0];
                for ((g, d), xv) in da.values_mut().iter_mut().zip(dout.values()).zip(x.values()) {
                    if *xv >= lo && *xv <= hi {
                        *g += d;
                    }
                }
            }
            Op::GatherRows => {
                let idx = pv(1);
                let cols = values[i].cols();
                let da = &mut gbefore[node.parents[0].0];
                for (r, &raw) in idx.values().iter().enumerate() {
                    let k = raw.round() as usize;
                    let d_row = &dout.values()[r * cols..(r + 1) * cols];
                    let g_row = &mut da.values_mut()[k * cols..(k + 1) * cols];
                    for j in 0..cols {
                        g_row[j] += d_row[j];
                    }
                }
            }
        }
    }

    /// evaluate + backward + gradient collection for the named inputs.
    pub fn gradient(
        &mut self,
        root: NodeId,
        wrt: &[&str],
    ) -> Result<Vec<(String, DenseMatrix)>, GraphError> {
        self.evaluate(root)?;
        self.backward(root)?;
        let mut out = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = self.input_id(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
            out.push((name.to_string(), self.grads[id.0].clone()));
        }
        Ok(out)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of a central-finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Perturbs every coordinate of every `wrt` input by ±`step` and compares the
/// central difference of the root value to the reverse-mode gradient.
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn finite_diff_check(
    graph: &mut Graph,
    root: NodeId,
    wrt: &[&str],
    step: f64,
    tolerance: f64,
) -> Result<FdReport, GraphError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    graph.evaluate(root)?;
    graph.backward(root)?;
    let analytic: Vec<(NodeId, DenseMatrix)> = wrt
        .iter()
        .map(|name| {
            let id = graph.input_id(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
            Ok((id, graph.grad(id).clone()))
        })
        .collect::<Result<_, GraphError>>()?;

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (input_id, grads) in &analytic {
        let base = graph.value(*input_id).clone();
        let (rows, cols) = base.shape();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.values_mut()[k] += step;
            graph.values[input_id.0] = plus;
            let f_plus = graph.evaluate(root)?.values()[0];

            let mut minus = base.clone();
            minus.values_mut()[k] -= step;
            graph.values[input_id.0] = minus;
            let f_minus = graph.evaluate(root)?.values()[0];

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grads.values()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((numeric - a).abs() / denom);
            checked += 1;
        }
        graph.values[input_id.0] = base;
        let _ = (rows, cols);
    }
    // restore cached values for the unperturbed point
    graph.evaluate(root)?;
    Ok(FdReport { max_rel_error: max_rel, checked, pass: max_rel < tolerance })
}

/// Seeded composite graphs exercising every op kind, for gradient
/// validation. Kinked ops (relu, clamp) get inputs bounded away from their
/// kinks so central differences are meaningful.
pub mod check {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
        DenseMatrix::from_vec_unchecked(
            rows,
            cols,
            (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect(),
        )
    }

    fn kink_free_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec_unchecked(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * (0.2 + rng.gen::<f64>())
                })
                .collect(),
        )
    }

    /// Builds a random graph whose forward path passes through every op
    /// kind, bound and ready to evaluate. Returns the scalar root and the
    /// differentiable input names.
    ///
    /// Draws are rejected while any differentiable coordinate has a tiny but
    /// nonzero gradient (under 1e-7): central differences cannot resolve
    /// such coordinates against the 1e-8 denominator floor, the same way
    /// they cannot resolve a point sitting on a relu kink. Exact structural
    /// zeros are fine (both sides of the comparison are exactly zero).
    pub fn random_composite_case(seed: u64) -> (Graph, NodeId, Vec<String>) {
        for attempt in 0..64u64 {
            let (mut g, root, wrt) = build_composite(seed.wrapping_add(attempt << 32));
            g.evaluate(root).expect("composite case evaluates");
            g.backward(root).expect("composite case backprops");
            let names: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
            let testable = names.iter().all(|name| {
                let id = g.input_id(name).expect("declared");
                g.grad(id).values().iter().all(|v| *v == 0.0 || v.abs() >= 1e-7)
            });
            if testable {
                return (g, root, wrt);
            }
        }
        panic!("no testable composite case found for seed {seed}");
    }

    fn build_composite(seed: u64) -> (Graph, NodeId, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(seed));
        let b = rng.gen_range(2..=4);
        let f = rng.gen_range(2..=5);
        let h = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=4);

        let mut g = Graph::new();
        let x = g.input("x", b, f);
        let w1 = g.input("w1", f, h);
        let b1 = g.input("b1", 1, h);
        let w2 = g.input("w2", h, k);
        let w3 = g.input("w3", b, k);
        let r_in = g.input("r_in", b, k);
        let targets = g.input("targets", b, k);
        let mse_target = g.input("mse_target", b, k);
        let idx = g.input("idx", b, 1);
        let half = g.input("half", b, k);

        let lin = g.matmul(x, w1).expect("shapes");
        let biased = g.add(lin, b1).expect("shapes");
        let act = g.activation(biased, Activation::Gelu);
        let normed = g.layer_norm(act);
        let z = g.matmul(normed, w2).expect("shapes");
        let ce = g.cross_entropy_loss(z, targets).expect("shapes");

        let s = g.softmax_rows(z);
        let st = g.transpose(s);
        let stt = g.transpose(st);
        let both = g.concat_rows(&[s, stt]).expect("shapes");
        let sliced = g.slice_rows(both, b, 2 * b).expect("shapes");
        let gathered = g.gather_rows(sliced, idx, b).expect("shapes");
        let mixed = g.add(gathered, w3).expect("shapes");
        let sig = g.sigmoid(mixed);
        let clamped = g.clamp(sig, 1e-7, 1.0 - 1e-7);
        let shifted = g.add(clamped, half).expect("shapes");
        let logged = g.log(shifted);
        let m1 = g.mse_loss(logged, mse_target).expect("shapes");

        let unit = g.normalize_rows(biased);
        let m2 = g.reduce_mean(unit);

        let rl = g.activation(r_in, Activation::Relu);
        let m3 = g.reduce_mean(rl);

        let partial = g.add(ce, m1).expect("scalars");
        let partial = g.add(partial, m2).expect("scalars");
        let partial = g.add(partial, m3).expect("scalars");
        let root = g.scale(partial, 0.5);

        g.set_input("x", matrix(&mut rng, b, f, 1.0)).expect("bind");
        g.set_input("w1", matrix(&mut rng, f, h, 0.8)).expect("bind");
        g.set_input("b1", matrix(&mut rng, 1, h, 0.3)).expect("bind");
        g.set_input("w2", matrix(&mut rng, h, k, 0.8)).expect("bind");
        g.set_input("w3", matrix(&mut rng, b, k, 0.5)).expect("bind");
        g.set_input("r_in", kink_free_matrix(&mut rng, b, k)).expect("bind");
        let mut onehot = DenseMatrix::zeros(b, k);
        for row in 0..b {
            onehot.set(row, rng.gen_range(0..k), 1.0);
        }
        g.set_input("targets", onehot).expect("bind");
        g.set_input("mse_target", matrix(&mut rng, b, k, 0.3)).expect("bind");
        let mut perm: Vec<f64> = (0..b).map(|i| i as f64).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        g.set_input("idx", DenseMatrix::column_vector(perm)).expect("bind");
        g.set_input("half", DenseMatrix::from_vec_unchecked(b, k, vec![0.5; b * k])).expect("bind");

        let wrt = ["x", "w1", "b1", "w2", "w3", "r_in"].iter().map(|s| s.to_string()).collect();
        (g, root, wrt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
        let values = (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
        DenseMatrix::from_vec(rows, cols, values).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let i2 = g.input("i", 2, 2);
        let a = g.input("a", 2, 2);
        let m = g.matmul(i2, a).unwrap();
        g.set_input("i", DenseMatrix::identity(2)).unwrap();
        g.set_input("a", DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = g.evaluate(m).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 2);
        let s = g.softmax_rows(x);
        g.set_input("x", DenseMatrix::zeros(1, 2)).unwrap();
        let out = g.evaluate(s).unwrap();
        assert!((out.values()[0] - 0.5).abs() < 1e-15);
        assert!((out.values()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_logits() {
        // oracle: -log(softmax_0) computed directly
        let z0 = 10.0f64;
        let z1 = -10.0f64;
        let expected = -(z0 - z0 - ((0.0f64).exp() + (z1 - z0).exp()).ln());
        let mut g = Graph::new();
        let logits = g.input("z", 1, 2);
        let targets = g.input("t", 1, 2);
        let ce = g.cross_entropy_loss(logits, targets).unwrap();
        g.set_input("z", DenseMatrix::from_vec(1, 2, vec![z0, z1]).unwrap()).unwrap();
        g.set_input("t", DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let loss = g.evaluate(ce).unwrap().values()[0];
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 2.06e-9).abs() < 0.01e-9, "loss {loss}");
    }

    #[test]
    fn gradient_of_mean_square() {
        // root = mean(x∘x) via mse(x, 0): grad = 2x/len
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        let zero = g.input("zero", 1, 3);
        let loss = g.mse_loss(x, zero).unwrap();
        g.set_input("x", DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        g.set_input("zero", DenseMatrix::zeros(1, 3)).unwrap();
        let grads = g.gradient(loss, &["x"]).unwrap();
        let gx = grads[0].1.values();
        assert!((gx[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((gx[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!((gx[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 2);
        g.set_input("x", DenseMatrix::zeros(2, 2)).unwrap();
        g.evaluate(x).unwrap();
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3);
        let b = g.input("b", 2, 3);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_intermediate_names_node() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let l = g.log(x);
        g.set_input("x", DenseMatrix::from_vec(1, 1, vec![-1.0]).unwrap()).unwrap();
        let err = g.evaluate(l).unwrap_err();
        assert!(matches!(err, GraphError::NonFinite { .. }), "{err:?}");
        assert!(err.to_string().contains("log"));
    }

    #[test]
    fn zero_norm_projection_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 4);
        let n = g.normalize_rows(x);
        g.set_input("x", DenseMatrix::zeros(1, 4)).unwrap();
        assert!(matches!(g.evaluate(n), Err(GraphError::DegenerateNorm { .. })));
    }

    #[test]
    fn fd_linear_graph() {
        // y = 3x: essentially exact
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let y = g.scale(x, 3.0);
        let root = g.reduce_mean(y);
        g.set_input("x", DenseMatrix::from_vec(1, 1, vec![0.7]).unwrap()).unwrap();
        let report = finite_diff_check(&mut g, root, &["x"], 1e-5, 1e-9).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn fd_gelu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.input("x", 2, 4);
        let w = g.input("w", 4, 3);
        let h = g.matmul(x, w).unwrap();
        let a = g.activation(h, Activation::Gelu);
        let zero = g.input("zero", 2, 3);
        let root = g.mse_loss(a, zero).unwrap();
        g.set_input("x", rand_matrix(&mut rng, 2, 4, 1.0)).unwrap();
        g.set_input("w", rand_matrix(&mut rng, 4, 3, 1.0)).unwrap();
        g.set_input("zero", DenseMatrix::zeros(2, 3)).unwrap();
        let report = finite_diff_check(&mut g, root, &["x", "w"], 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn fd_softmax_cross_entropy_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input("x", 3, 4);
        let w = g.input("w", 4, 5);
        let z = g.matmul(x, w).unwrap();
        let t = g.input("t", 3, 5);
        let root = g.cross_entropy_loss(z, t).unwrap();
        g.set_input("x", rand_matrix(&mut rng, 3, 4, 1.0)).unwrap();
        g.set_input("w", rand_matrix(&mut rng, 4, 5, 1.0)).unwrap();
        let mut targets = DenseMatrix::zeros(3, 5);
        for r in 0..3 {
            let c = rng.gen_range(0..5);
            targets.set(r, c, 1.0);
        }
        g.set_input("t", targets).unwrap();
        let report = finite_diff_check(&mut g, root, &["x", "w"], 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn fd_two_layer_mlp_cross_entropy() {
        // spec-level oracle: random 2-layer MLP + cross-entropy on 5 inputs
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut g = Graph::new();
            let x = g.input("x", 5, 6);
            let w1 = g.input("w1", 6, 8);
            let b1 = g.input("b1", 1, 8);
            let w2 = g.input("w2", 8, 4);
            let t = g.input("t", 5, 4);
            let h = g.matmul(x, w1).unwrap();
            let hb = g.add(h, b1).unwrap();
            let a = g.activation(hb, Activation::Gelu);
            let z = g.matmul(a, w2).unwrap();
            let root = g.cross_entropy_loss(z, t).unwrap();
            g.set_input("x", rand_matrix(&mut rng, 5, 6, 1.0)).unwrap();
            g.set_input("w1", rand_matrix(&mut rng, 6, 8, 0.7)).unwrap();
            g.set_input("b1", rand_matrix(&mut rng, 1, 8, 0.2)).unwrap();
            g.set_input("w2", rand_matrix(&mut rng, 8, 4, 0.7)).unwrap();
            let mut targets = DenseMatrix::zeros(5, 4);
            for r in 0..5 {
                let c = rng.gen_range(0..4);
                targets.set(r, c, 1.0);
            }
            g.set_input("t", targets).unwrap();
            let report =
                finite_diff_check(&mut g, root, &["x", "w1", "b1", "w2"], 1e-5, 1e-4).unwrap();
            assert!(report.pass, "seed {seed}: max rel {}", report.max_rel_error);
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input("x", 3, 3);
        let ln = g.layer_norm(x);
        let s = g.softmax_rows(ln);
        let root = g.reduce_mean(s);
        let xv = rand_matrix(&mut rng, 3, 3, 2.0);
        g.set_input("x", xv.clone()).unwrap();
        let v1 = g.evaluate(root).unwrap().clone();
        let mut g2 = g.clone();
        g2.set_input("x", xv).unwrap();
        let v2 = g2.evaluate(root).unwrap().clone();
        assert_eq!(v1.values(), v2.values());
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_matrix(&mut rng, 4, 4, 1.0);
        let b = rand_matrix(&mut rng, 4, 4, 1.0);
        let c = rand_matrix(&mut rng, 4, 4, 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn gather_rows_permutes_and_backprops() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 2);
        let idx = g.input("idx", 3, 1);
        let p = g.gather_rows(x, idx, 3).unwrap();
        let zero = g.input("zero", 3, 2);
        let root = g.mse_loss(p, zero).unwrap();
        g.set_input("x", DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        g.set_input("idx", DenseMatrix::from_vec(3, 1, vec![2.0, 0.0, 1.0]).unwrap()).unwrap();
        g.set_input("zero", DenseMatrix::zeros(3, 2)).unwrap();
        g.evaluate(root).unwrap();
        assert_eq!(g.value(p).values(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let report = finite_diff_check(&mut g, root, &["x"], 1e-6, 1e-6).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn composite_cases_pass_finite_differences() {
        for seed in 0..10u64 {
            let (mut g, root, wrt) = check::random_composite_case(seed);
            let names: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
            let report = finite_diff_check(&mut g, root, &names, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "seed {seed}: max rel {}", report.max_rel_error);
        }
    }

    #[test]
    fn clamp_matches_closed_form() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        let c = g.clamp(x, 0.0, 1.0);
        g.set_input("x", DenseMatrix::from_vec(1, 3, vec![-0.5, 0.5, 1.5]).unwrap()).unwrap();
        let out = g.evaluate(c).unwrap();
        assert_eq!(out.values(), &[0.0, 0.5, 1.0]);
    }
}
