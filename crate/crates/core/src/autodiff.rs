//! Tape-based reverse-mode differentiation over dense row-major `f64`
//! tensors, with the Adam optimizer and learning-rate schedule used for
//! training.
//!
//! Operations are evaluated eagerly as they are recorded. Every tensor is
//! viewed as a matrix whose column count is the last dimension; row-wise
//! ops (softmax, layer norm, cross-entropy) work along that last axis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover the strided
    // m x k, k x n and m x n views.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Which entries of an attention score matrix may be attended.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Queries `0..rows` attend to `prefix` always-visible columns followed
    /// by a causal window over `rows` positions.
    pub fn causal_with_prefix(rows: usize, prefix: usize) -> Self {
        let cols = prefix + rows;
        let mut allowed = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..prefix + r + 1 {
                allowed[r * cols + c] = true;
            }
        }
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    /// Arbitrary row-major visibility pattern.
    pub fn from_allowed(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), rows * cols, "mask size");
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::causal_with_prefix(n, 0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    Mul,
    Affine,
    Concat,
    ConcatRows,
    Split,
    SliceRows,
    Embedding,
    Softmax,
    LayerNorm,
    Relu,
    PRelu,
    Gelu,
    Sigmoid,
    Softplus,
    Mean,
    Sum,
    CrossEntropy,
    Reparameterize,
    GaussianKl,
    ClampMin,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, scale: f64 },
    Concat { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Split { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    Embedding { table: NodeId, ids: Vec<usize> },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: NodeId },
    PRelu { x: NodeId, alpha: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Mean { x: NodeId },
    Sum { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Reparameterize { mu: NodeId, sigma: NodeId, eps: Vec<f64> },
    GaussianKl { mu: NodeId, sigma: NodeId },
    ClampMin { x: NodeId, min: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Concat { .. } => OpKind::Concat,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::Split { .. } => OpKind::Split,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::PRelu { .. } => OpKind::PRelu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Reparameterize { .. } => OpKind::Reparameterize,
            Op::GaussianKl { .. } => OpKind::GaussianKl,
            Op::ClampMin { .. } => OpKind::ClampMin,
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// How the second operand of `add`/`mul` is broadcast against the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape == b.shape {
        Some(Broadcast::Same)
    } else if b.len() == 1 {
        Some(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Some(Broadcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn b_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// In-place numerically stable softmax of one row, honouring a mask.
pub fn softmax_row(row: &mut [f64], allowed: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed.is_none_or(|a| a[i]) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if allowed.is_none_or(|a| a[i]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// A recording of operations over a read-only parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            params: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to any recorded node (inputs included).
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, b) in m.data.iter_mut().zip(&t.data) {
                            *a += b;
                        }
                    }
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.iter_mut().flatten() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Leaf referring to a parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk || bv.shape.len() != 2 {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape, bv.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        gemm(m, k, n, &av.data, k as isize, 1, &bv.data, rsb, csb, &mut out, 0.0);
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::MatMul { a, b, trans_b }, Tensor { shape, data: out }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_ext(a, b, false)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, mul: bool) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv).ok_or_else(|| {
            mismatch(
                if mul { "mul" } else { "add" },
                format!("{:?} vs {:?}", av.shape, bv.shape),
            )
        })?;
        let cols = av.cols();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv.data[b_index(kind, i, cols)];
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(op, value))
    }

    /// Elementwise sum; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, true)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| scale * v + shift).collect(),
        };
        self.push(Op::Affine { x, scale }, value)
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::matrix(rows, total, data),
        ))
    }

    /// Row-wise stacking of equally wide matrices.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rows = data.len() / cols.max(1);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::matrix(rows, cols, data),
        ))
    }

    /// Columns `start..start + len`.
    pub fn split(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + len > cols {
            return Err(mismatch("split", format!("{start}+{len} > {cols}")));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(Op::Split { x, start }, Tensor::matrix(rows, len, data)))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(mismatch("slice_rows", format!("{start}+{len} > {}", xv.rows())));
        }
        let c = xv.cols();
        let data = xv.data[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, Tensor::matrix(len, c, data)))
    }

    /// Gathers rows of `table` (an embedding lookup when `table` is a parameter).
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let tv = self.value(table);
        let c = tv.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(mismatch("embedding", format!("row {bad} of {}", tv.rows())));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::matrix(ids.len(), c, data),
        ))
    }

    /// Row-wise softmax; masked-out entries get probability exactly 0.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&Rc<Mask>>) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.rows != rows || m.cols != cols {
                return Err(mismatch(
                    "softmax",
                    format!("mask {}x{} vs {rows}x{cols}", m.rows, m.cols),
                ));
            }
        }
        let mut data = xv.data.clone();
        for r in 0..rows {
            let allowed = mask.map(|m| &m.allowed[r * cols..(r + 1) * cols]);
            softmax_row(&mut data[r * cols..(r + 1) * cols], allowed);
        }
        let shape = xv.shape.clone();
        Ok(self.push(Op::Softmax { x }, Tensor { shape, data }))
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// affine `gamma`/`beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != cols || bv.len() != cols {
            return Err(mismatch("layer_norm", format!("affine size vs {cols} columns")));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = gv.data[c] * h + bv.data[c];
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor { shape, data: out },
        ))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus { x })
    }

    /// Parametric ReLU with a learned slope per column (or one shared slope).
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, av) = (self.value(x), self.value(alpha));
        let cols = xv.cols();
        if av.len() != 1 && av.len() != cols {
            return Err(mismatch("prelu", format!("{} slopes for {cols} columns", av.len())));
        }
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = if av.len() == 1 { av.data[0] } else { av.data[i % cols] };
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            })
            .collect();
        let shape = xv.shape.clone();
        Ok(self.push(Op::PRelu { x, alpha }, Tensor { shape, data }))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::Mean { x }, Tensor::scalar(m))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum::<f64>();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, AutodiffError> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) || rows == 0 {
            return Err(mismatch(
                "cross_entropy",
                format!("{} targets for {rows}x{cols} logits", targets.len()),
            ));
        }
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss / rows as f64),
        ))
    }

    /// `mu + sigma * eps` with `eps` drawn from a standard normal.
    pub fn reparameterize<R: Rng>(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        rng: &mut R,
    ) -> Result<NodeId, AutodiffError> {
        let n = self.value(mu).len();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        self.reparameterize_with(mu, sigma, eps)
    }

    /// [`Graph::reparameterize`] with caller-supplied noise.
    pub fn reparameterize_with(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        eps: Vec<f64>,
    ) -> Result<NodeId, AutodiffError> {
        let (mv, sv) = (self.value(mu), self.value(sigma));
        if mv.shape != sv.shape || eps.len() != mv.len() {
            return Err(mismatch("reparameterize", format!("{:?} vs {:?}", mv.shape, sv.shape)));
        }
        let data = (0..mv.len()).map(|i| mv.data[i] + sv.data[i] * eps[i]).collect();
        let shape = mv.shape.clone();
        Ok(self.push(Op::Reparameterize { mu, sigma, eps }, Tensor { shape, data }))
    }

    /// Elementwise `KL(N(mu, sigma^2) || N(0, 1))`.
    pub fn gaussian_kl(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId, AutodiffError> {
        let (mv, sv) = (self.value(mu), self.value(sigma));
        if mv.shape != sv.shape {
            return Err(mismatch("gaussian_kl", format!("{:?} vs {:?}", mv.shape, sv.shape)));
        }
        let data = mv
            .data
            .iter()
            .zip(&sv.data)
            .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
            .collect();
        let shape = mv.shape.clone();
        Ok(self.push(Op::GaussianKl { mu, sigma }, Tensor { shape, data }))
    }

    /// `max(min, x)`; no gradient flows where `x < min`.
    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = self.value(NodeId(idx));
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = out.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    // dA = dC @ B^T   (B is k x n, or n x k when trans_b)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    gemm(m, n, k, &g, n as isize, 1, &bv.data, rsb, csb, ga, 1.0);
                    let gb = acc(&mut grads, *b, bv.len());
                    if *trans_b {
                        // dB (n x k) = dC^T @ A
                        gemm(n, m, k, &g, 1, n as isize, &av.data, k as isize, 1, gb, 1.0);
                    } else {
                        // dB (k x n) = A^T @ dC
                        gemm(k, m, n, &av.data, 1, k as isize, &g, n as isize, 1, gb, 1.0);
                    }
                }
                Op::Add { a, b } | Op::Mul { a, b } => {
                    let is_mul = matches!(node.op, Op::Mul { .. });
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let kind = broadcast_kind(av, bv).unwrap();
                    let cols = av.cols();
                    {
                        let ga = acc(&mut grads, *a, av.len());
                        for i in 0..g.len() {
                            ga[i] += if is_mul { g[i] * bv.data[b_index(kind, i, cols)] } else { g[i] };
                        }
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for i in 0..g.len() {
                        gb[b_index(kind, i, cols)] += if is_mul { g[i] * av.data[i] } else { g[i] };
                    }
                }
                Op::Affine { x, scale } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += scale * g[i];
                    }
                }
                Op::Concat { parts } => {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let gp = acc(&mut grads, p, rows * pc);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * total + offset + c];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = acc(&mut grads, p, n);
                        for i in 0..n {
                            gp[i] += g[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::Split { x, start } => {
                    let xv = self.value(*x);
                    let (rows, cols, len) = (xv.rows(), xv.cols(), out.cols());
                    let gx = acc(&mut grads, *x, xv.len());
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = acc(&mut grads, *x, xv.len());
                    for i in 0..g.len() {
                        gx[start * c + i] += g[i];
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let gt = acc(&mut grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                }
                Op::Softmax { x } => {
                    let cols = out.cols();
                    let gx = acc(&mut grads, *x, out.len());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = out.cols();
                    let rows = out.rows();
                    let gv = self.value(*gamma).data.clone();
                    {
                        let gg = acc(&mut grads, *gamma, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[r * cols + c];
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, rows * cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            gx[r * cols + c] +=
                                inv_std[r] / n * (n * d - sum_d - xhat[r * cols + c] * sum_dx);
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv.data[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::PRelu { x, alpha } => {
                    let (xv, av) = (self.value(*x), self.value(*alpha));
                    let cols = xv.cols();
                    let shared = av.len() == 1;
                    let slope = |i: usize| if shared { av.data[0] } else { av.data[i % cols] };
                    {
                        let gx = acc(&mut grads, *x, g.len());
                        for i in 0..g.len() {
                            gx[i] += if xv.data[i] > 0.0 { g[i] } else { slope(i) * g[i] };
                        }
                    }
                    let ga = acc(&mut grads, *alpha, av.len());
                    for i in 0..g.len() {
                        if xv.data[i] <= 0.0 {
                            ga[if shared { 0 } else { i % cols }] += g[i] * xv.data[i];
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv.data[i]);
                    }
                }
                Op::Sigmoid { x } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let y = out.data[i];
                        gx[i] += g[i] * y * (1.0 - y);
                    }
                }
                Op::Softplus { x } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv.data[i]);
                    }
                }
                Op::Mean { x } => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    let d = g[0] / n as f64;
                    for v in gx.iter_mut() {
                        *v += d;
                    }
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let rows = targets.len();
                    let cols = probs.len() / rows;
                    let scale = g[0] / rows as f64;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                }
                Op::Reparameterize { mu, sigma, eps } => {
                    {
                        let gm = acc(&mut grads, *mu, g.len());
                        for i in 0..g.len() {
                            gm[i] += g[i];
                        }
                    }
                    let gs = acc(&mut grads, *sigma, g.len());
                    for i in 0..g.len() {
                        gs[i] += g[i] * eps[i];
                    }
                }
                Op::GaussianKl { mu, sigma } => {
                    let (mv, sv) = (self.value(*mu), self.value(*sigma));
                    {
                        let gm = acc(&mut grads, *mu, g.len());
                        for i in 0..g.len() {
                            gm[i] += g[i] * mv.data[i];
                        }
                    }
                    let gs = acc(&mut grads, *sigma, g.len());
                    for i in 0..g.len() {
                        let s = sv.data[i];
                        gs[i] += g[i] * (s - 1.0 / s);
                    }
                }
                Op::ClampMin { x, min } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv.data[i] >= *min {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = vec![None; self.params.len()];
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = &grads[nid.0] {
                params[pid.0] = Some(Tensor {
                    shape: self.params.get(pid).shape.clone(),
                    data: g.clone(),
                });
            }
        }
        Ok(Gradients { params, nodes: grads })
    }
}

/// Adam hyper-parameters and moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient keep
/// their value but their moments still decay.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, value) in params.values.iter_mut().enumerate() {
        let g = grads.params.get(i).and_then(|g| g.as_ref());
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..value.data.len() {
            let gj = g.map_or(0.0, |g| g.data[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            value.data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

/// Linear warm-up followed by cosine decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak: f64,
    pub decay_steps: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 200,
            peak: 1e-4,
            decay_steps: 200_000,
            floor: 5e-6,
        }
    }
}

pub fn lr_schedule(step: u64, cfg: &LrSchedule) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak * step as f64 / cfg.warmup_steps as f64;
    }
    let t = (step - cfg.warmup_steps).min(cfg.decay_steps) as f64 / cfg.decay_steps.max(1) as f64;
    cfg.floor + (cfg.peak - cfg.floor) * 0.5 * (1.0 + (PI * t).cos())
}
