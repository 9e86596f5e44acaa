//! Reverse-mode differentiation on a Wengert tape.
//!
//! The forward pass records one [`Op`] per primitive into a linear tape;
//! [`Tape::backward`] replays it in reverse and accumulates a gradient for
//! every recorded node. Nodes are matrices (scalars are 1x1, row vectors
//! 1xN), and inputs are always recorded before the ops that consume them,
//! so a single reverse sweep visits everything in a valid order.
//!
//! A tape lives for one training step: build, evaluate, backward, drop.
//! All reductions accumulate in ascending index order, so results do not
//! depend on any execution strategy.

use crate::error::{Error, Result};
use crate::tensor::matrix::Matrix;
use crate::tensor::ops::{
    cosine_kernel, log_sigmoid_unchecked, log_softmax_entry_unchecked, sigmoid, EPS_GUARD,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug)]
enum Op {
    /// Gradient-tracked input (parameters, anything a caller reads grads for).
    Leaf,
    /// Data the graph treats as fixed: batch features, dropout masks, positional encodings.
    Constant,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    MulElem {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    /// Matrix plus a 1xN row broadcast over every row (bias add).
    AddRow {
        a: usize,
        row: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    Gelu {
        a: usize,
    },
    /// Extract row `index` of a matrix as a 1xN node.
    Row {
        a: usize,
        index: usize,
    },
    /// Extract column `index` of a matrix as a 1xR node.
    Col {
        a: usize,
        index: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
    /// Fused cosine similarity of two 1xN nodes, with forward products cached
    /// for the backward pass.
    CosineSim {
        a: usize,
        b: usize,
        dot_ab: f64,
        dot_aa: f64,
        dot_bb: f64,
    },
    /// Elementwise log sigma(x).
    LogSigmoid {
        a: usize,
    },
    /// scores[index]/tau - logsumexp(scores/tau) of a 1xN node.
    LogSoftmaxEntry {
        a: usize,
        index: usize,
        tau: f64,
    },
    /// Pack 1x1 nodes into a single 1xK node.
    ConcatScalars {
        parts: Vec<usize>,
    },
    /// Mean over all entries.
    MeanAll {
        a: usize,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the node `r`.
    pub fn wrt(&self, r: TensorRef) -> &Matrix {
        &self.grads[r.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> TensorRef {
        self.nodes.push(Node { op, value });
        TensorRef(self.nodes.len() - 1)
    }

    fn val(&self, r: TensorRef) -> &Matrix {
        &self.nodes[r.0].value
    }

    /// Record a gradient-tracked input.
    pub fn leaf(&mut self, value: Matrix) -> TensorRef {
        self.push(Op::Leaf, value)
    }

    /// Record fixed data; gradients flowing into it are discarded.
    pub fn constant(&mut self, value: Matrix) -> TensorRef {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, r: TensorRef) -> &Matrix {
        self.val(r)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, r: TensorRef) -> f64 {
        self.val(r).scalar()
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (m, ka) = self.val(a).shape();
        let (kb, n) = self.val(b).shape();
        assert_eq!(ka, kb, "matmul {m}x{ka} @ {kb}x{n}");
        let value = matmul_nn(self.val(a), self.val(b));
        self.push(Op::MatMul { a: a.0, b: b.0 }, value)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = zip_elem(self.val(a), self.val(b), |x, y| x + y);
        self.push(Op::Add { a: a.0, b: b.0 }, value)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = zip_elem(self.val(a), self.val(b), |x, y| x - y);
        self.push(Op::Sub { a: a.0, b: b.0 }, value)
    }

    pub fn mul_elem(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = zip_elem(self.val(a), self.val(b), |x, y| x * y);
        self.push(Op::MulElem { a: a.0, b: b.0 }, value)
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let value = map_elem(self.val(a), |x| x * factor);
        self.push(Op::Scale { a: a.0, factor }, value)
    }

    pub fn add_row(&mut self, a: TensorRef, row: TensorRef) -> TensorRef {
        let (_, n) = self.val(a).shape();
        assert_eq!(self.val(row).shape(), (1, n), "bias row must be 1x{n}");
        let mut value = self.val(a).clone();
        let r = self.val(row);
        for i in 0..value.rows() {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v += r.get(0, j);
            }
        }
        self.push(Op::AddRow { a: a.0, row: row.0 }, value)
    }

    pub fn leaky_relu(&mut self, a: TensorRef, slope: f64) -> TensorRef {
        let value = map_elem(self.val(a), |x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu { a: a.0, slope }, value)
    }

    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let value = map_elem(self.val(a), gelu_fwd);
        self.push(Op::Gelu { a: a.0 }, value)
    }

    pub fn row(&mut self, a: TensorRef, index: usize) -> TensorRef {
        let src = self.val(a);
        assert!(index < src.rows(), "row {index} of {} rows", src.rows());
        let value = Matrix::from_row(src.row(index).to_vec()).expect("row of finite matrix");
        self.push(Op::Row { a: a.0, index }, value)
    }

    pub fn col(&mut self, a: TensorRef, index: usize) -> TensorRef {
        let src = self.val(a);
        assert!(index < src.cols(), "col {index} of {} cols", src.cols());
        let data: Vec<f64> = (0..src.rows()).map(|r| src.get(r, index)).collect();
        let value = Matrix::from_row(data).expect("col of finite matrix");
        self.push(Op::Col { a: a.0, index }, value)
    }

    pub fn dot(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "dot of mismatched shapes");
        assert_eq!(va.rows(), 1, "dot expects 1xN nodes");
        let value = scalar_matrix(crate::tensor::dot(va.data(), vb.data()));
        self.push(Op::Dot { a: a.0, b: b.0 }, value)
    }

    /// Differentiable cosine similarity of two 1xN nodes.
    pub fn cosine_similarity(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() || va.rows() != 1 {
            return Err(Error::Shape(format!(
                "cosine_similarity of {:?} and {:?} nodes",
                va.shape(),
                vb.shape()
            )));
        }
        let (value, dot_ab, dot_aa, dot_bb) = cosine_kernel(va.data(), vb.data())?;
        Ok(self.push(
            Op::CosineSim {
                a: a.0,
                b: b.0,
                dot_ab,
                dot_aa,
                dot_bb,
            },
            scalar_matrix(value),
        ))
    }

    pub fn log_sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let value = map_elem(self.val(a), log_sigmoid_unchecked);
        self.push(Op::LogSigmoid { a: a.0 }, value)
    }

    /// Differentiable log-softmax entry of a 1xN scores node.
    pub fn log_softmax_entry(&mut self, a: TensorRef, index: usize, tau: f64) -> Result<TensorRef> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Config(format!(
                "softmax temperature must be positive and finite, got {tau}"
            )));
        }
        let scores = self.val(a);
        assert_eq!(scores.rows(), 1, "log_softmax_entry expects a 1xN node");
        assert!(index < scores.cols());
        let value = log_softmax_entry_unchecked(scores.data(), index, tau);
        Ok(self.push(Op::LogSoftmaxEntry { a: a.0, index, tau }, scalar_matrix(value)))
    }

    /// Pack 1x1 nodes into a 1xK node.
    pub fn concat_scalars(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_scalars of nothing");
        let data: Vec<f64> = parts.iter().map(|p| self.scalar(*p)).collect();
        let value = Matrix::from_row(data).expect("finite scalars");
        self.push(
            Op::ConcatScalars {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            value,
        )
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let v = self.val(a);
        assert!(v.data().len() > 0, "mean_all of an empty node");
        let mean = v.data().iter().sum::<f64>() / v.data().len() as f64;
        self.push(Op::MeanAll { a: a.0 }, scalar_matrix(mean))
    }

    /// Mean of a set of 1x1 nodes.
    pub fn mean_scalars(&mut self, parts: &[TensorRef]) -> TensorRef {
        let packed = self.concat_scalars(parts);
        self.mean_all(packed)
    }

    /// x @ w + bias-row: the affine map used by every layer in this crate.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> TensorRef {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Accumulate gradients of a scalar root with respect to every node.
    pub fn backward(&self, root: TensorRef) -> Result<Gradients> {
        let root_val = self.val(root);
        if !root_val.is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {:?}",
                root_val.shape()
            )));
        }
        root_val.check_finite("backward root")?;

        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for id in (0..=root.0).rev() {
            // Inputs always precede their consumers, so the incoming gradient
            // can be split off immutably while targets stay mutable.
            let (head, tail) = grads.split_at_mut(id);
            let dz = &tail[0];
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    accumulate_matmul_nt(dz, vb, &mut head[*a]);
                    accumulate_matmul_tn(va, dz, &mut head[*b]);
                }
                Op::Add { a, b } => {
                    axpy(1.0, dz, &mut head[*a]);
                    axpy(1.0, dz, &mut head[*b]);
                }
                Op::Sub { a, b } => {
                    axpy(1.0, dz, &mut head[*a]);
                    axpy(-1.0, dz, &mut head[*b]);
                }
                Op::MulElem { a, b } => {
                    if a == b {
                        let va = self.nodes[*a].value.clone();
                        for (g, (d, x)) in head[*a]
                            .data_mut()
                            .iter_mut()
                            .zip(dz.data().iter().zip(va.data()))
                        {
                            *g += 2.0 * d * x;
                        }
                    } else {
                        let va = &self.nodes[*a].value;
                        let vb = &self.nodes[*b].value;
                        for (g, (d, y)) in head[*a]
                            .data_mut()
                            .iter_mut()
                            .zip(dz.data().iter().zip(vb.data()))
                        {
                            *g += d * y;
                        }
                        for (g, (d, x)) in head[*b]
                            .data_mut()
                            .iter_mut()
                            .zip(dz.data().iter().zip(va.data()))
                        {
                            *g += d * x;
                        }
                    }
                }
                Op::Scale { a, factor } => axpy(*factor, dz, &mut head[*a]),
                Op::AddRow { a, row } => {
                    axpy(1.0, dz, &mut head[*a]);
                    let cols = dz.cols();
                    for i in 0..dz.rows() {
                        let src = dz.row(i);
                        let dst = head[*row].row_mut(0);
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    let va = &self.nodes[*a].value;
                    for (g, (d, x)) in head[*a]
                        .data_mut()
                        .iter_mut()
                        .zip(dz.data().iter().zip(va.data()))
                    {
                        *g += d * if *x > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Gelu { a } => {
                    let va = &self.nodes[*a].value;
                    for (g, (d, x)) in head[*a]
                        .data_mut()
                        .iter_mut()
                        .zip(dz.data().iter().zip(va.data()))
                    {
                        *g += d * gelu_grad(*x);
                    }
                }
                Op::Row { a, index } => {
                    let dst = head[*a].row_mut(*index);
                    for (g, d) in dst.iter_mut().zip(dz.data()) {
                        *g += d;
                    }
                }
                Op::Col { a, index } => {
                    let target = &mut head[*a];
                    for (r, d) in dz.data().iter().enumerate() {
                        let v = target.get(r, *index) + d;
                        target.set(r, *index, v);
                    }
                }
                Op::Dot { a, b } => {
                    let d = dz.scalar();
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    if a == b {
                        for (g, x) in head[*a].data_mut().iter_mut().zip(va.data()) {
                            *g += 2.0 * d * x;
                        }
                    } else {
                        for (g, y) in head[*a].data_mut().iter_mut().zip(vb.data()) {
                            *g += d * y;
                        }
                        for (g, x) in head[*b].data_mut().iter_mut().zip(va.data()) {
                            *g += d * x;
                        }
                    }
                }
                Op::CosineSim {
                    a,
                    b,
                    dot_ab,
                    dot_aa,
                    dot_bb,
                } => {
                    let d = dz.scalar();
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let den = (dot_aa * dot_bb).sqrt();
                    if den > EPS_GUARD {
                        let c = dot_ab / den;
                        for (g, (x, y)) in head[*a]
                            .data_mut()
                            .iter_mut()
                            .zip(va.data().iter().zip(vb.data()))
                        {
                            *g += d * (y / den - c * x / dot_aa);
                        }
                        for (g, (x, y)) in head[*b]
                            .data_mut()
                            .iter_mut()
                            .zip(va.data().iter().zip(vb.data()))
                        {
                            *g += d * (x / den - c * y / dot_bb);
                        }
                    } else {
                        // Clamped denominator: value is dot_ab / EPS_GUARD.
                        for (g, y) in head[*a].data_mut().iter_mut().zip(vb.data()) {
                            *g += d * y / EPS_GUARD;
                        }
                        for (g, x) in head[*b].data_mut().iter_mut().zip(va.data()) {
                            *g += d * x / EPS_GUARD;
                        }
                    }
                }
                Op::LogSigmoid { a } => {
                    let va = &self.nodes[*a].value;
                    for (g, (d, x)) in head[*a]
                        .data_mut()
                        .iter_mut()
                        .zip(dz.data().iter().zip(va.data()))
                    {
                        *g += d * sigmoid(-x);
                    }
                }
                Op::LogSoftmaxEntry { a, index, tau } => {
                    let d = dz.scalar();
                    let scores = &self.nodes[*a].value;
                    let max = scores
                        .data()
                        .iter()
                        .fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
                    let mut total = 0.0;
                    for &s in scores.data() {
                        total += (s / tau - max).exp();
                    }
                    let dst = head[*a].row_mut(0);
                    for (j, (&s, g)) in scores.data().iter().zip(dst.iter_mut()).enumerate() {
                        let p = (s / tau - max).exp() / total;
                        let indicator = if j == *index { 1.0 } else { 0.0 };
                        *g += d * (indicator - p) / tau;
                    }
                }
                Op::ConcatScalars { parts } => {
                    for (k, p) in parts.iter().enumerate() {
                        let v = head[*p].get(0, 0) + dz.get(0, k);
                        head[*p].set(0, 0, v);
                    }
                }
                Op::MeanAll { a } => {
                    let d = dz.scalar() / self.nodes[*a].value.data().len() as f64;
                    for g in head[*a].data_mut() {
                        *g += d;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn scalar_matrix(v: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![v]).unwrap_or_else(|_| {
        // Keep the invariant visible at the point of failure.
        panic!("non-finite scalar {v} on tape")
    })
}

fn map_elem(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = a.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip_elem(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    let mut out = a.clone();
    for (v, y) in out.data_mut().iter_mut().zip(b.data()) {
        *v = f(*v, *y);
    }
    out
}

fn axpy(alpha: f64, x: &Matrix, y: &mut Matrix) {
    debug_assert_eq!(x.shape(), y.shape());
    for (dst, src) in y.data_mut().iter_mut().zip(x.data()) {
        *dst += alpha * src;
    }
}

fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av != 0.0 {
                let brow = b.row(p);
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// out += dz @ b^T, where dz is m x n and b is k x n.
fn accumulate_matmul_nt(dz: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (m, n) = dz.shape();
    let k = b.rows();
    debug_assert_eq!(out.shape(), (m, k));
    for i in 0..m {
        let drow = dz.row(i);
        let orow = out.row_mut(i);
        for p in 0..k {
            orow[p] += crate::tensor::dot(drow, &b.row(p)[..n]);
        }
    }
}

/// out += a^T @ dz, where a is m x k and dz is m x n.
fn accumulate_matmul_tn(a: &Matrix, dz: &Matrix, out: &mut Matrix) {
    let (m, k) = a.shape();
    let n = dz.cols();
    debug_assert_eq!(out.shape(), (k, n));
    for i in 0..m {
        let arow = a.row(i);
        let drow = dz.row(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av != 0.0 {
                let orow = out.row_mut(p);
                for j in 0..n {
                    orow[j] += av * drow[j];
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh approximation of x * Phi(x)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}
