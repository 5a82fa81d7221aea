//! Tape-style reverse-mode differentiation over dense tensors.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep. Every
//! reduction sums left to right, which makes forward values bitwise
//! reproducible for identical inputs.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `inputs` are the values of the op's input nodes in the order they were
/// registered; the result must hold one gradient buffer per input.
pub trait CustomBackward: Send + Sync {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

/// The forward/backward primitives offered by [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRowBias,
    MatMul,
    MatMulTransposed,
    Transpose,
    Reshape,
    Conv1d,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
    Abs,
    Exp,
    Ln,
    RowSoftmax,
    LayerNorm,
    Sum,
    Mean,
    MeanRows,
    GatherRows,
    SoftmaxCrossEntropy,
    RowNormalize,
    RowDot,
    DivScalar,
    ConcatRows,
}

pub fn primitive_set() -> &'static [Primitive] {
    use Primitive::*;
    &[
        Add,
        Sub,
        Mul,
        Scale,
        AddScalar,
        AddRowBias,
        MatMul,
        MatMulTransposed,
        Transpose,
        Reshape,
        Conv1d,
        Sigmoid,
        Tanh,
        Gelu,
        Relu,
        Abs,
        Exp,
        Ln,
        RowSoftmax,
        LayerNorm,
        Sum,
        Mean,
        MeanRows,
        GatherRows,
        SoftmaxCrossEntropy,
        RowNormalize,
        RowDot,
        DivScalar,
        ConcatRows,
    ]
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    DivScalar(Var, Var),
    ConcatRows(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomBackward>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// Dense kernels. Fixed loop order keeps results reproducible.

/// `a (n x k) * b (k x m)`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// `a^T * b` where `a` is `n x k` and `b` is `n x m`; result `k x m`.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

/// `(output frame, kernel tap, input frame)` triples that touch real input.
fn conv_taps(
    t: usize,
    tout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..tout).flat_map(move |j| {
        (0..k).filter_map(move |kk| {
            let src = (j * stride + kk).checked_sub(pad)?;
            (src < t).then_some((j, kk, src))
        })
    })
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(name.to_string()));
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places a tensor on the graph; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let ng = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push_checked(name, t, op, ng)
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push_checked(name, t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map_unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map_unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    /// Adds a length-`m` bias to every row of an `n x m` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.value(bias).numel() != m {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for {n}x{m}", self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push_checked("add_row_bias", t, Op::AddRowBias(x, bias), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = matmul_raw(self.data(a), self.data(b), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", Tensor::matrix(n, m, data)?, Op::MatMul(a, b), ng)
    }

    /// `a * b^T` for `a: n x k`, `b: m x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let data = matmul_bt_raw(self.data(a), self.data(b), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul_bt", Tensor::matrix(n, m, data)?, Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = transpose_raw(self.data(x), r, c);
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(t.shape().to_vec(), t.into_data())?,
            Op::Reshape(x),
            ng,
        ))
    }

    /// 1-D convolution along the time (row) axis of a `T x C_in` matrix.
    ///
    /// `w` has shape `[C_out, C_in, K]` with odd `K`; zero padding of
    /// `(K - 1) / 2` frames on both ends, so the output has
    /// `ceil(T / stride)` frames when `K == 3`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || ws[2].is_multiple_of(2) || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {t}x{cin}, kernel {ws:?}, stride {stride}"),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.value(b).numel() != cout {
            return Err(Error::shape("conv1d", "bias length"));
        }
        let pad = (k - 1) / 2;
        if t + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("{t} frames too short")));
        }
        let tout = conv_out_len(t, k, stride, pad);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; tout * cout];
        for j in 0..tout {
            for o in 0..cout {
                let mut s = bd[o];
                for kk in 0..k {
                    let src = (j * stride + kk) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                    for c in 0..cin {
                        s += wd[(o * cin + c) * k + kk] * xrow[c];
                    }
                }
                out[j * cout + o] = s;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push_checked(
            "conv1d",
            Tensor::matrix(tout, cout, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map_unary("ln", x, f64::ln, Op::Ln(x))
    }

    /// Max-subtracted softmax over each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.dims(x);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x);
        self.push_checked("row_softmax", t, Op::RowSoftmax(x), ng)
    }

    /// Layer normalization over each row with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.value(gain).numel() != m || self.value(bias).numel() != m {
            return Err(Error::shape("layer_norm", "gain/bias length"));
        }
        let mut xhat = Vec::with_capacity(n * m);
        let mut rstd = Vec::with_capacity(n);
        for row in self.data(x).chunks(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let data = xhat
            .chunks(m)
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(h, (gg, bb))| h * gg + bb)
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push_checked(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let ng = self.ng(x);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Column means of an `n x m` matrix, returned as `1 x m`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let mut out = vec![0.0; m];
        for row in self.data(x).chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push_checked("mean_rows", Tensor::matrix(1, m, out)?, Op::MeanRows(x), ng)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, m) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= v {
                return Err(Error::IdOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), m, data)?,
            Op::GatherRows(table, ids.to_vec()),
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `n x V` logits against `n` class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, (row, &t)) in self.data(logits).chunks(v).zip(targets).enumerate() {
            if t >= v {
                return Err(Error::IdOutOfRange { id: t, vocab: v });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[i * v..(i + 1) * v]);
        }
        loss /= n as f64;
        let ng = self.ng(logits);
        self.push_checked(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.dims(x);
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::ZeroNormVector {
                    op: "row_normalize",
                    norm,
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x);
        self.push_checked("row_normalize", t, Op::RowNormalize { x, norms }, ng)
    }

    /// Row-wise inner products of two `n x m` matrices, as a length-`n` vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (n, m) = self.dims(a);
        let data = self
            .data(a)
            .chunks(m)
            .zip(self.data(b).chunks(m))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("row_dot", Tensor::new(vec![n], data)?, Op::RowDot(a, b), ng)
    }

    /// Divides every element of `x` by the single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("div_scalar", "divisor must be a scalar"));
        }
        let d = self.scalar(s);
        let data = self.data(x).iter().map(|v| v / d).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(s);
        self.push_checked("div_scalar", t, Op::DivScalar(x, s), ng)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        };
        let (_, m) = self.dims(first);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != m {
                return Err(Error::shape("concat_rows", format!("{c} vs {m} columns")));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, m, data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Registers an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Result<Var> {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push_checked("custom", output, Op::Custom(inputs.to_vec(), rule), ng)
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.value.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a single-element `root`, filling `grad` on every
    /// node that depends on a tracked leaf. Previous gradients are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.ng(root) {
            return Ok(());
        }
        self.nodes[root.0].value.grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].value.grad = Some(g);
            for (v, pg) in contributions {
                self.accumulate(v, pg);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.data(v);
        let mut res: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut want = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.ng(v) {
                res.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                want(*a, &|| g.to_vec());
                want(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                want(*a, &|| g.to_vec());
                want(*b, &|| g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                want(*a, &|| g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                want(*b, &|| g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, s) => want(*x, &|| g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => want(*x, &|| g.to_vec()),
            Op::AddRowBias(x, b) => {
                want(*x, &|| g.to_vec());
                want(*b, &|| {
                    let m = self.value(*b).numel();
                    let mut acc = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let (_, m) = self.dims(*b);
                want(*a, &|| matmul_bt_raw(g, val(*b), n, m, k));
                want(*b, &|| matmul_at_raw(val(*a), g, n, k, m));
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.dims(*a);
                let (m, _) = self.dims(*b);
                want(*a, &|| matmul_raw(g, val(*b), n, m, k));
                want(*b, &|| matmul_at_raw(g, val(*a), n, m, k));
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                want(*x, &|| transpose_raw(g, c, r));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (t, cin) = self.dims(*x);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let tout = out.dims2().0;
                let (stride, pad) = (*stride, *pad);
                want(*x, &|| {
                    let wd = val(*w);
                    let mut dx = vec![0.0; t * cin];
                    for (j, kk, src) in conv_taps(t, tout, k, stride, pad) {
                        for o in 0..cout {
                            let go = g[j * cout + o];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..cin {
                                dx[src * cin + c] += go * wd[(o * cin + c) * k + kk];
                            }
                        }
                    }
                    dx
                });
                want(*w, &|| {
                    let xd = val(*x);
                    let mut dw = vec![0.0; cout * cin * k];
                    for (j, kk, src) in conv_taps(t, tout, k, stride, pad) {
                        for o in 0..cout {
                            let go = g[j * cout + o];
                            for c in 0..cin {
                                dw[(o * cin + c) * k + kk] += go * xd[src * cin + c];
                            }
                        }
                    }
                    dw
                });
                want(*b, &|| {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    db
                });
            }
            Op::Sigmoid(x) => want(*x, &|| {
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect()
            }),
            Op::Tanh(x) => want(*x, &|| {
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect()
            }),
            Op::Gelu(x) => want(*x, &|| {
                g.iter().zip(val(*x)).map(|(g, x)| g * gelu_grad(*x)).collect()
            }),
            Op::Relu(x) => want(*x, &|| {
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            }),
            Op::Abs(x) => want(*x, &|| {
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }),
            Op::Exp(x) => want(*x, &|| g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Ln(x) => want(*x, &|| g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::RowSoftmax(x) => want(*x, &|| {
                let (_, m) = out.dims2();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(m).zip(out.data().chunks(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                dx
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (_, m) = out.dims2();
                want(*x, &|| {
                    let gd = val(*gain);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), r) in g.chunks(m).zip(xhat.chunks(m)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| r * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    dx
                });
                want(*gain, &|| {
                    let mut dg = vec![0.0; m];
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for ((a, gi), hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *a += gi * hi;
                        }
                    }
                    dg
                });
                want(*bias, &|| {
                    let mut db = vec![0.0; m];
                    for gr in g.chunks(m) {
                        for (a, gi) in db.iter_mut().zip(gr) {
                            *a += gi;
                        }
                    }
                    db
                });
            }
            Op::Sum(x) => want(*x, &|| vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => want(*x, &|| {
                let n = self.value(*x).numel();
                vec![g[0] / n as f64; n]
            }),
            Op::MeanRows(x) => want(*x, &|| {
                let (n, _) = self.dims(*x);
                let row: Vec<f64> = g.iter().map(|v| v / n as f64).collect();
                row.repeat(n)
            }),
            Op::GatherRows(table, ids) => want(*table, &|| {
                let (v, m) = self.dims(*table);
                let mut dt = vec![0.0; v * m];
                for (gr, &id) in g.chunks(m).zip(ids) {
                    for (a, b) in dt[id * m..(id + 1) * m].iter_mut().zip(gr) {
                        *a += b;
                    }
                }
                dt
            }),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => want(*logits, &|| {
                let (n, v) = self.dims(*logits);
                let s = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= s;
                }
                d
            }),
            Op::RowNormalize { x, norms } => want(*x, &|| {
                let (_, m) = out.dims2();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), nrm) in g.chunks(m).zip(out.data().chunks(m)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / nrm));
                }
                dx
            }),
            Op::RowDot(a, b) => {
                let (_, m) = self.dims(*a);
                let expand = |other: Var| -> Vec<f64> {
                    val(other)
                        .chunks(m)
                        .zip(g)
                        .flat_map(|(row, gi)| row.iter().map(move |v| v * gi))
                        .collect()
                };
                want(*a, &|| expand(*b));
                want(*b, &|| expand(*a));
            }
            Op::DivScalar(x, s) => {
                let d = self.scalar(*s);
                want(*x, &|| g.iter().map(|v| v / d).collect());
                want(*s, &|| {
                    let dot: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                    vec![-dot / (d * d)]
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = &g[offset..offset + n];
                    want(p, &|| slice.to_vec());
                    offset += n;
                }
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = rule.backward(&values, out, g);
                for (&v, pg) in inputs.iter().zip(grads) {
                    want(v, &|| pg.clone());
                }
            }
        }
        res
    }
}

/// Plain (non-graph) cosine similarity of two equal-length vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(
            "cosine",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for norm in [nx, ny] {
        if norm < NORM_FLOOR {
            return Err(Error::ZeroNormVector { op: "cosine", norm });
        }
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Differentiable cosine similarity of two vectors (any shape, flattened).
pub fn cosine_similarity(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (nx, ny) = (g.value(x).numel(), g.value(y).numel());
    if nx != ny {
        return Err(Error::shape("cosine_similarity", format!("{nx} vs {ny}")));
    }
    let xr = g.reshape(x, &[1, nx])?;
    let yr = g.reshape(y, &[1, ny])?;
    let xn = g.row_normalize(xr)?;
    let yn = g.row_normalize(yr)?;
    g.row_dot(xn, yn)
}
