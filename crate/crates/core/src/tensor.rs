//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are addressed through copyable [`Var`] handles; [`Tape::backward`]
//! replays the tape in reverse and returns a [`Gradients`] map. Tapes are meant
//! to be built for a single training step and then dropped.
//!
//! Broadcasting is deliberately narrow: a row vector can be added to every row
//! of a matrix ([`OpKind::BroadcastAddRow`]) and a column can scale every row
//! ([`OpKind::MulCol`]). Everything else requires identical shapes.

use std::fmt;

use crate::error::{Error, Result};

/// Floor applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-major dense array with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a `rows × cols` matrix; panics if the data length disagrees.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::matrix(1, n, data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::matrix(n, 1, data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Leading extent of a matrix (1 for scalars and vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing extent (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The given rows of a matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let data = rows
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        Tensor::matrix(rows.len(), c, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[i,j] = Σ_k a[i,k]·b[k,j]`. Zero entries of `a` are skipped, which
/// pays off on sparse image inputs.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &aval) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aval * bv;
            }
        }
    }
    out
}

/// `out = a · bᵀ` with `a: n×m`, `b: k×m`.
fn matmul_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let b_row = &b[j * m..(j + 1) * m];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out = aᵀ · g` with `a: n×k`, `g: n×m`.
fn matmul_at(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        for (p, &aval) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aval * gv;
            }
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Every operation the tape knows how to differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Softplus,
    Exp,
    /// Natural log of `max(x, LOG_FLOOR)`.
    Log,
    Sigmoid,
    Neg,
    /// Sum of all entries, scalar result.
    Sum,
    /// Mean of all entries, scalar result.
    Mean,
    ConcatLastDim,
    /// `a[n,m] + b[1,m]` (or `b[m]`) added to each row.
    BroadcastAddRow,
    Scale(f64),
    AddScalar(f64),
    Square,
    Reciprocal,
    /// Clamp into `[lo, hi]`; gradient is zero outside.
    Clamp(f64, f64),
    /// Row sums of a matrix, `n×m → n×1`.
    SumRows,
    /// `a[n,m] ⊙ c[n,1]`, scaling every row by its own factor.
    MulCol,
    /// Row-wise log-softmax of a matrix.
    LogSoftmax,
    /// Rows `start..start+len` of a matrix.
    SliceRows {
        start: usize,
        len: usize,
    },
    /// Columns `start..start+len` of a matrix.
    SliceCols {
        start: usize,
        len: usize,
    },
    /// `out[i,j] = ‖a_i − b_j‖²` between rows of `a[n,d]` and `b[m,d]`.
    PairwiseSqDist,
    /// `max(x, floor)` applied to a scalar; gradient zero when clamped.
    FloorScalar(f64),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Neg => "neg",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatLastDim => "concat",
            OpKind::BroadcastAddRow => "broadcast_add_row",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Square => "square",
            OpKind::Reciprocal => "reciprocal",
            OpKind::Clamp(..) => "clamp",
            OpKind::SumRows => "sum_rows",
            OpKind::MulCol => "mul_col",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::PairwiseSqDist => "pairwise_sq_dist",
            OpKind::FloorScalar(_) => "floor_scalar",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::ConcatLastDim
            | OpKind::BroadcastAddRow
            | OpKind::MulCol
            | OpKind::PairwiseSqDist => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum NodeOp {
    Leaf,
    Op(OpKind, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: NodeOp,
    value: Tensor,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape.len() == 2
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: NodeOp, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(NodeOp::Leaf, value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeOp::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluates `op` on `inputs` and records it.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(NodeOp::Op(op, parents), value, requires_grad))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|v| &self.nodes[v.0].value);
        let out = match op {
            OpKind::MatMul => {
                let b = b.unwrap();
                if !is_matrix(a) || !is_matrix(b) || a.shape[1] != b.shape[0] {
                    return Err(mismatch(op, a, b));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                Tensor {
                    shape: vec![n, m],
                    data: matmul_raw(&a.data, &b.data, n, k, m),
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = b.unwrap();
                if a.shape != b.shape {
                    return Err(mismatch(op, a, b));
                }
                match op {
                    OpKind::Add => a.zip(b, |x, y| x + y),
                    OpKind::Sub => a.zip(b, |x, y| x - y),
                    _ => a.zip(b, |x, y| x * y),
                }
            }
            OpKind::Relu => a.map(|x| x.max(0.0)),
            OpKind::Softplus => a.map(softplus),
            OpKind::Exp => a.map(f64::exp),
            OpKind::Log => a.map(|x| x.max(LOG_FLOOR).ln()),
            OpKind::Sigmoid => a.map(sigmoid),
            OpKind::Neg => a.map(|x| -x),
            OpKind::Sum => Tensor::scalar(a.data.iter().sum()),
            OpKind::Mean => {
                if a.data.is_empty() {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Tensor::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
            }
            OpKind::ConcatLastDim => {
                let b = b.unwrap();
                if a.shape.len() != b.shape.len()
                    || a.shape.is_empty()
                    || a.shape[..a.shape.len() - 1] != b.shape[..b.shape.len() - 1]
                {
                    return Err(mismatch(op, a, b));
                }
                let (ca, cb) = (a.cols(), b.cols());
                let rows = a.rows();
                let mut data = Vec::with_capacity(a.len() + b.len());
                for r in 0..rows {
                    data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = ca + cb;
                Tensor { shape, data }
            }
            OpKind::BroadcastAddRow => {
                let b = b.unwrap();
                if !is_matrix(a) || b.len() != a.shape[1] || b.rows() != 1 {
                    return Err(mismatch(op, a, b));
                }
                let m = a.shape[1];
                let mut data = a.data.clone();
                for row in data.chunks_mut(m) {
                    for (x, y) in row.iter_mut().zip(&b.data) {
                        *x += y;
                    }
                }
                Tensor {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::Scale(c) => a.map(|x| c * x),
            OpKind::AddScalar(c) => a.map(|x| x + c),
            OpKind::Square => a.map(|x| x * x),
            OpKind::Reciprocal => a.map(|x| 1.0 / x),
            OpKind::Clamp(lo, hi) => a.map(|x| x.clamp(*lo, *hi)),
            OpKind::SumRows => {
                if !is_matrix(a) {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: vec![],
                    });
                }
                let m = a.shape[1];
                let data = if m == 0 {
                    vec![0.0; a.shape[0]]
                } else {
                    a.data.chunks(m).map(|r| r.iter().sum()).collect()
                };
                Tensor {
                    shape: vec![a.shape[0], 1],
                    data,
                }
            }
            OpKind::MulCol => {
                let b = b.unwrap();
                if !is_matrix(a) || b.shape != [a.shape[0], 1] {
                    return Err(mismatch(op, a, b));
                }
                let m = a.shape[1];
                let mut data = a.data.clone();
                if m > 0 {
                    for (row, &c) in data.chunks_mut(m).zip(&b.data) {
                        row.iter_mut().for_each(|x| *x *= c);
                    }
                }
                Tensor {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::LogSoftmax => {
                if !is_matrix(a) || a.shape[1] == 0 {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: vec![],
                    });
                }
                let m = a.shape[1];
                let mut data = Vec::with_capacity(a.len());
                for row in a.data.chunks(m) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    data.extend(row.iter().map(|x| x - lse));
                }
                Tensor {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::SliceRows { start, len } => {
                if !is_matrix(a) || start + len > a.shape[0] {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: vec![*start, *len],
                    });
                }
                let m = a.shape[1];
                Tensor {
                    shape: vec![*len, m],
                    data: a.data[start * m..(start + len) * m].to_vec(),
                }
            }
            OpKind::SliceCols { start, len } => {
                if !is_matrix(a) || start + len > a.shape[1] {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: vec![*start, *len],
                    });
                }
                let m = a.shape[1];
                let mut data = Vec::with_capacity(a.shape[0] * len);
                for row in 0..a.shape[0] {
                    data.extend_from_slice(&a.data[row * m + start..row * m + start + len]);
                }
                Tensor {
                    shape: vec![a.shape[0], *len],
                    data,
                }
            }
            OpKind::PairwiseSqDist => {
                let b = b.unwrap();
                if !is_matrix(a) || !is_matrix(b) || a.shape[1] != b.shape[1] {
                    return Err(mismatch(op, a, b));
                }
                let (n, m, d) = (a.shape[0], b.shape[0], a.shape[1]);
                let mut data = Vec::with_capacity(n * m);
                for i in 0..n {
                    let ai = &a.data[i * d..(i + 1) * d];
                    for j in 0..m {
                        let bj = &b.data[j * d..(j + 1) * d];
                        data.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
                    }
                }
                Tensor {
                    shape: vec![n, m],
                    data,
                }
            }
            OpKind::FloorScalar(floor) => {
                if !a.is_scalar() {
                    return Err(Error::NonScalarLoss(a.shape.clone()));
                }
                Tensor {
                    shape: a.shape.clone(),
                    data: vec![a.data[0].max(*floor)],
                }
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are summed over fan-out. Nodes that do not depend on any
    /// `leaf` get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(&root.value.shape, 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let NodeOp::Op(op, parents) = &node.op {
                let contributions = self.local_grads(op, parents, &node.value, &g);
                for (&p, contrib) in parents.iter().zip(contributions) {
                    let Some(contrib) = contrib else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        // Only keep entries that are reachable and differentiable.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(
        &self,
        op: &OpKind,
        parents: &[usize],
        out: &Tensor,
        g: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let a = &self.nodes[parents[0]].value;
        let need = |i: usize| self.nodes[parents[i]].requires_grad;
        match op {
            OpKind::MatMul => {
                let b = &self.nodes[parents[1]].value;
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let ga = need(0).then(|| Tensor {
                    shape: a.shape.clone(),
                    data: matmul_bt(&g.data, &b.data, n, m, k),
                });
                let gb = need(1).then(|| Tensor {
                    shape: b.shape.clone(),
                    data: matmul_at(&a.data, &g.data, n, k, m),
                });
                vec![ga, gb]
            }
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            OpKind::Mul => {
                let b = &self.nodes[parents[1]].value;
                vec![
                    need(0).then(|| g.zip(b, |x, y| x * y)),
                    need(1).then(|| g.zip(a, |x, y| x * y)),
                ]
            }
            OpKind::Relu => vec![Some(g.zip(a, |gx, x| if x > 0.0 { gx } else { 0.0 }))],
            OpKind::Softplus => vec![Some(g.zip(a, |gx, x| gx * sigmoid(x)))],
            OpKind::Exp => vec![Some(g.zip(out, |gx, y| gx * y))],
            OpKind::Log => vec![Some(g.zip(
                a,
                |gx, x| {
                    if x > LOG_FLOOR {
                        gx / x
                    } else {
                        0.0
                    }
                },
            ))],
            OpKind::Sigmoid => vec![Some(g.zip(out, |gx, s| gx * s * (1.0 - s)))],
            OpKind::Neg => vec![Some(g.map(|x| -x))],
            OpKind::Sum => vec![Some(Tensor::full(&a.shape, g.item()))],
            OpKind::Mean => vec![Some(Tensor::full(&a.shape, g.item() / a.len() as f64))],
            OpKind::ConcatLastDim => {
                let b = &self.nodes[parents[1]].value;
                let (ca, cb) = (a.cols(), b.cols());
                let mut ga = Vec::with_capacity(a.len());
                let mut gb = Vec::with_capacity(b.len());
                for row in g.data.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![
                    Some(Tensor {
                        shape: a.shape.clone(),
                        data: ga,
                    }),
                    Some(Tensor {
                        shape: b.shape.clone(),
                        data: gb,
                    }),
                ]
            }
            OpKind::BroadcastAddRow => {
                let b = &self.nodes[parents[1]].value;
                let m = a.shape[1];
                let mut gb = vec![0.0; m];
                for row in g.data.chunks(m) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor {
                        shape: b.shape.clone(),
                        data: gb,
                    }),
                ]
            }
            OpKind::Scale(c) => vec![Some(g.map(|x| c * x))],
            OpKind::AddScalar(_) => vec![Some(g.clone())],
            OpKind::Square => vec![Some(g.zip(a, |gx, x| 2.0 * x * gx))],
            OpKind::Reciprocal => vec![Some(g.zip(out, |gx, y| -gx * y * y))],
            OpKind::Clamp(lo, hi) => {
                vec![Some(g.zip(
                    a,
                    |gx, x| {
                        if x >= *lo && x <= *hi {
                            gx
                        } else {
                            0.0
                        }
                    },
                ))]
            }
            OpKind::SumRows => {
                let m = a.shape[1];
                let mut data = Vec::with_capacity(a.len());
                for &gi in &g.data {
                    data.extend(std::iter::repeat_n(gi, m));
                }
                vec![Some(Tensor {
                    shape: a.shape.clone(),
                    data,
                })]
            }
            OpKind::MulCol => {
                let c = &self.nodes[parents[1]].value;
                let m = a.shape[1];
                let ga = need(0).then(|| {
                    let mut data = g.data.clone();
                    if m > 0 {
                        for (row, &ci) in data.chunks_mut(m).zip(&c.data) {
                            row.iter_mut().for_each(|x| *x *= ci);
                        }
                    }
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    }
                });
                let gc = need(1).then(|| {
                    let data = (0..a.shape[0])
                        .map(|i| (0..m).map(|j| g.data[i * m + j] * a.data[i * m + j]).sum())
                        .collect();
                    Tensor {
                        shape: c.shape.clone(),
                        data,
                    }
                });
                vec![ga, gc]
            }
            OpKind::LogSoftmax => {
                let m = a.shape[1];
                let mut data = Vec::with_capacity(a.len());
                for (grow, orow) in g.data.chunks(m).zip(out.data.chunks(m)) {
                    let gsum: f64 = grow.iter().sum();
                    data.extend(grow.iter().zip(orow).map(|(gx, lp)| gx - lp.exp() * gsum));
                }
                vec![Some(Tensor {
                    shape: a.shape.clone(),
                    data,
                })]
            }
            OpKind::SliceRows { start, len } => {
                let m = a.shape[1];
                let mut data = vec![0.0; a.len()];
                data[start * m..(start + len) * m].copy_from_slice(&g.data);
                vec![Some(Tensor {
                    shape: a.shape.clone(),
                    data,
                })]
            }
            OpKind::SliceCols { start, len } => {
                let m = a.shape[1];
                let mut data = vec![0.0; a.len()];
                for row in 0..a.shape[0] {
                    data[row * m + start..row * m + start + len]
                        .copy_from_slice(&g.data[row * len..(row + 1) * len]);
                }
                vec![Some(Tensor {
                    shape: a.shape.clone(),
                    data,
                })]
            }
            OpKind::PairwiseSqDist => {
                let b = &self.nodes[parents[1]].value;
                let (n, m, d) = (a.shape[0], b.shape[0], a.shape[1]);
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = 2.0 * gij * (a.data[i * d + k] - b.data[j * d + k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                vec![
                    need(0).then(|| Tensor {
                        shape: a.shape.clone(),
                        data: ga,
                    }),
                    need(1).then(|| Tensor {
                        shape: b.shape.clone(),
                        data: gb,
                    }),
                ]
            }
            OpKind::FloorScalar(floor) => {
                let active = a.data[0] >= *floor;
                vec![Some(g.map(|x| if active { x } else { 0.0 }))]
            }
        }
    }

    // Convenience wrappers. Shape errors surface through `Result`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::ConcatLastDim, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(OpKind::BroadcastAddRow, &[a, row])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Reciprocal, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp(lo, hi), &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumRows, &[a])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(OpKind::MulCol, &[a, col])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::PairwiseSqDist, &[a, b])
    }
    pub fn floor_scalar(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(OpKind::FloorScalar(floor), &[a])
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (up - down) / (2.0 * eps);
    }
    out
}
