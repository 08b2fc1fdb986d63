//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied during one forward pass. Values
//! live on the tape and are addressed by [`Var`] handles; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients into every node
//! that depends on a parameter. Constants (features, detached values,
//! adjacency operators) never receive gradients.
//!
//! The operation set is closed over what the autoencoder needs: dense and
//! sparse products, elementwise maps, row-wise reductions, gathers, and the
//! edge-level softmax/aggregation used by attention layers.

use rand::Rng;

use crate::graph::NormalizedAdjacency;
use crate::tensor::Matrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: input outside the domain of the operation")]
    Domain { op: &'static str },
    #[error("non-finite value produced by {op} (record {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter, assigned by the owning store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<'a> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    SpMM(&'a NormalizedAdjacency, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Prelu(Var, Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    SoftmaxRows(Var, f64),
    RowNormalize(Var, Vec<f64>),
    RowDot(Var, Var),
    Mean(Var),
    Sum(Var),
    Dropout(Var, Vec<f64>),
    Pow(Var, f64),
    GatherRows(Var, Vec<usize>),
    StraightThrough(Var),
    Clamp(Var, f64, f64),
    SegmentSoftmax(Var, &'a [usize]),
    EdgeAggregate(Var, Var, &'a NormalizedAdjacency),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::SpMM(..) => "sparse_matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Prelu(..) => "prelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(..) => "elu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RowNormalize(..) => "row_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Dropout(..) => "dropout",
            Op::Pow(..) => "pow",
            Op::GatherRows(..) => "gather_rows",
            Op::StraightThrough(..) => "straight_through",
            Op::Clamp(..) => "clamp",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::EdgeAggregate(..) => "edge_aggregate",
        }
    }
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    training: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; unreachable parameters yield `None`.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, idx)| self.grads[idx].as_ref())
    }
}

fn shape_eq(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(src: &[f64], scale: f64, dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = ((s - max) * scale).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl<'a> Tape<'a> {
    /// `training` controls dropout; evaluation tapes make it the identity.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op<'a>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                index: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Result<Var> {
        self.push(value, Op::Param(id), true)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let out = x.matmul(y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `adj · x` with the adjacency held constant.
    pub fn sparse_matmul(&mut self, adj: &'a NormalizedAdjacency, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != adj.num_nodes() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sparse_matmul",
                left: (adj.num_nodes(), adj.num_nodes()),
                right: xv.shape(),
            });
        }
        let out = spmm(adj, xv);
        let rg = self.rg(x);
        self.push(out, Op::SpMM(adj, x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1×c` row to every row of an `n×c` matrix (bias).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        let rv = r.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x <= 0.0) {
            return Err(AutodiffError::Domain { op: "log" });
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Parametric ReLU with a learned per-column slope (`1×c`).
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(slope));
        if s.rows() != 1 || s.cols() != x.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "prelu",
                left: x.shape(),
                right: s.shape(),
            });
        }
        let c = x.cols();
        let mut out = x.clone();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= s.as_slice()[k % c];
            }
        }
        let rg = self.rg(a) || self.rg(slope);
        self.push(out, Op::Prelu(a, slope), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(a);
        self.push(out, Op::Elu(a), rg)
    }

    /// Row-wise softmax of `a / temperature`, max-shifted per row.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(AutodiffError::Domain { op: "softmax_rows" });
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_slice(x.row(r), 1.0 / temperature, out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a, temperature), rg)
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = x.row_norms();
        let mut out = x.clone();
        for (r, &n) in norms.iter().enumerate() {
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize(a, norms), rg)
    }

    /// Per-row inner product, `n×c, n×c -> n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("row_dot", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Matrix::from_fn(x.rows(), 1, |r, _| x.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowDot(a, b), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(AutodiffError::Domain { op: "mean" });
        }
        let out = Matrix::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Domain { op: "dropout" });
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().zip(&mask).map(|(v, m)| v * m).collect());
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let x = self.value(a);
        if exponent.fract() != 0.0 && x.as_slice().iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Domain { op: "pow" });
        }
        let out = x.map(|v| v.powf(exponent));
        let rg = self.rg(a);
        self.push(out, Op::Pow(a, exponent), rg)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: x.rows(),
            });
        }
        let out = x.gather_rows(indices);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, indices.to_vec()), rg)
    }

    /// Forward value is `quantized`; backward hands the incoming gradient to
    /// `input` unchanged. `quantized` is treated as a constant.
    pub fn straight_through(&mut self, input: Var, quantized: Matrix) -> Result<Var> {
        if self.value(input).shape() != quantized.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "straight_through",
                left: self.value(input).shape(),
                right: quantized.shape(),
            });
        }
        let rg = self.rg(input);
        self.push(quantized, Op::StraightThrough(input), rg)
    }

    /// Elementwise clamp; zero gradient outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Softmax of an `e×1` score column within each CSR row segment.
    pub fn segment_softmax(&mut self, scores: Var, offsets: &'a [usize]) -> Result<Var> {
        let x = self.value(scores);
        if x.cols() != 1 || x.rows() != *offsets.last().unwrap_or(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_softmax",
                left: x.shape(),
                right: (*offsets.last().unwrap_or(&0), 1),
            });
        }
        let mut out = Matrix::zeros(x.rows(), 1);
        for w in offsets.windows(2) {
            if w[0] < w[1] {
                softmax_slice(&x.as_slice()[w[0]..w[1]], 1.0, &mut out.as_mut_slice()[w[0]..w[1]]);
            }
        }
        let rg = self.rg(scores);
        self.push(out, Op::SegmentSoftmax(scores, offsets), rg)
    }

    /// `out[i] = Σ_{e in row i} w[e] · values[target(e)]` over the CSR
    /// structure of `adj` (its stored weights are ignored).
    pub fn edge_aggregate(&mut self, weights: Var, values: Var, adj: &'a NormalizedAdjacency) -> Result<Var> {
        let (w, z) = (self.value(weights), self.value(values));
        if w.shape() != (adj.nnz(), 1) || z.rows() != adj.num_nodes() {
            return Err(AutodiffError::ShapeMismatch {
                op: "edge_aggregate",
                left: w.shape(),
                right: z.shape(),
            });
        }
        let d = z.cols();
        let mut out = Matrix::zeros(z.rows(), d);
        for i in 0..adj.num_nodes() {
            let orow = out.row_mut(i);
            for e in adj.offsets[i]..adj.offsets[i + 1] {
                let we = w.as_slice()[e];
                for (o, v) in orow.iter_mut().zip(z.row(adj.targets[e])) {
                    *o += we * v;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        self.push(out, Op::EdgeAggregate(weights, values, adj), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    index: idx,
                });
            }
            for (input, contrib) in self.input_grads(node, &g) {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn input_grads(&self, node: &Node<'a>, g: &Matrix) -> Vec<(Var, Matrix)> {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.rg(v);
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, g.matmul_t(val(*b))));
                }
                if want(*b) {
                    out.push((*b, val(*a).t_matmul(g)));
                }
                out
            }
            Op::SpMM(adj, x) => vec![(*x, spmm_transpose(adj, g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, r) => {
                let mut col = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (c, v) in col.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *c += v;
                    }
                }
                vec![(*a, g.clone()), (*r, col)]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |p, q| p * q)), (*b, g.zip_map(val(*a), |p, q| p * q))],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let part = Matrix::from_fn(g.rows(), w, |r, c| g[(r, c0 + c)]);
                        c0 += w;
                        (p, part)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let h = val(p).rows();
                        let part = Matrix::from_fn(h, g.cols(), |r, c| g[(r0 + r, c)]);
                        r0 += h;
                        (p, part)
                    })
                    .collect()
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |p, q| p * q))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |p, x| p / x))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |p, s| p * s * (1.0 - s)))],
            Op::Prelu(a, slope) => {
                let x = val(*a);
                let s = val(*slope).as_slice();
                let c = x.cols();
                let mut dx = g.clone();
                let mut ds = Matrix::zeros(1, c);
                for (k, (d, &xv)) in dx.as_mut_slice().iter_mut().zip(x.as_slice()).enumerate() {
                    if xv <= 0.0 {
                        ds.as_mut_slice()[k % c] += *d * xv;
                        *d *= s[k % c];
                    }
                }
                vec![(*a, dx), (*slope, ds)]
            }
            Op::LeakyRelu(a, s) => vec![(*a, g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { p * s }))],
            Op::Elu(a) => vec![(
                *a,
                Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice()
                        .iter()
                        .zip(val(*a).as_slice())
                        .zip(y.as_slice())
                        .map(|((&p, &x), &yv)| if x > 0.0 { p } else { p * (yv + 1.0) })
                        .collect(),
                ),
            )],
            Op::SoftmaxRows(a, t) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / t;
                    }
                }
                vec![(*a, dx)]
            }
            Op::RowNormalize(a, norms) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                vec![(*a, dx)]
            }
            Op::RowDot(a, b) => {
                let scale_rows = |m: &Matrix| {
                    let mut out = m.clone();
                    for r in 0..out.rows() {
                        let s = g[(r, 0)];
                        out.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    out
                };
                vec![(*a, scale_rows(val(*b))), (*b, scale_rows(val(*a)))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Matrix::filled(x.rows(), x.cols(), g.item() / x.len() as f64))]
            }
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Matrix::filled(x.rows(), x.cols(), g.item()))]
            }
            Op::Dropout(a, mask) => vec![(
                *a,
                Matrix::from_vec(g.rows(), g.cols(), g.as_slice().iter().zip(mask).map(|(p, m)| p * m).collect()),
            )],
            Op::Pow(a, p) => vec![(*a, g.zip_map(val(*a), |d, x| d * p * x.powf(p - 1.0)))],
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                vec![(*a, dx)]
            }
            Op::StraightThrough(a) => vec![(*a, g.clone())],
            Op::Clamp(a, lo, hi) => vec![(*a, g.zip_map(val(*a), |d, x| if x > *lo && x < *hi { d } else { 0.0 }))],
            Op::SegmentSoftmax(a, offsets) => {
                let mut dx = Matrix::zeros(y.rows(), 1);
                for w in offsets.windows(2) {
                    let (ys, gs) = (&y.as_slice()[w[0]..w[1]], &g.as_slice()[w[0]..w[1]]);
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for (e, d) in dx.as_mut_slice()[w[0]..w[1]].iter_mut().enumerate() {
                        *d = ys[e] * (gs[e] - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::EdgeAggregate(w, z, adj) => {
                let (wv, zv) = (val(*w), val(*z));
                let mut dw = Matrix::zeros(wv.rows(), 1);
                let mut dz = Matrix::zeros(zv.rows(), zv.cols());
                for i in 0..adj.num_nodes() {
                    let gi = g.row(i);
                    for e in adj.offsets[i]..adj.offsets[i + 1] {
                        let t = adj.targets[e];
                        dw.as_mut_slice()[e] = gi.iter().zip(zv.row(t)).map(|(p, q)| p * q).sum();
                        let we = wv.as_slice()[e];
                        for (d, gv) in dz.row_mut(t).iter_mut().zip(gi) {
                            *d += we * gv;
                        }
                    }
                }
                vec![(*w, dw), (*z, dz)]
            }
        }
    }
}

/// `adj · x`, one output row per task.
pub fn spmm(adj: &NormalizedAdjacency, x: &Matrix) -> Matrix {
    use rayon::prelude::*;
    let d = x.cols();
    let mut out = Matrix::zeros(adj.num_nodes(), d);
    if d == 0 {
        return out;
    }
    let kernel = |(i, orow): (usize, &mut [f64])| {
        for e in adj.offsets[i]..adj.offsets[i + 1] {
            let w = adj.weights[e];
            for (o, v) in orow.iter_mut().zip(x.row(adj.targets[e])) {
                *o += w * v;
            }
        }
    };
    if adj.nnz() * d >= 1 << 16 {
        out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(kernel);
    } else {
        out.as_mut_slice().chunks_mut(d).enumerate().for_each(kernel);
    }
    out
}

/// `adjᵀ · g`, serial scatter in CSR order.
fn spmm_transpose(adj: &NormalizedAdjacency, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(adj.num_nodes(), g.cols());
    for i in 0..adj.num_nodes() {
        for e in adj.offsets[i]..adj.offsets[i + 1] {
            let w = adj.weights[e];
            let t = adj.targets[e];
            for c in 0..g.cols() {
                out[(t, c)] += w * g[(i, c)];
            }
        }
    }
    out
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh evaluation tape from one `Var` per
/// entry of `params`. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every coordinate.
pub fn finite_diff_check<'g, F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'g>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix]| -> Result<(Tape<'g>, Vec<Var>, Var)> {
        let mut tape = Tape::new(false);
        let vars = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(params[pi].rows(), params[pi].cols()));
        for k in 0..params[pi].len() {
            let orig = params[pi].as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + h;
            let (t1, _, l1) = eval(&work)?;
            let plus = t1.value(l1).item();
            work[pi].as_mut_slice()[k] = orig - h;
            let (t2, _, l2) = eval(&work)?;
            let minus = t2.value(l2).item();
            work[pi].as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic.as_slice()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
