//! Named parameter storage and the handful of layers the models are built from.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
///
/// Insertion order is preserved everywhere (binding, optimizer state,
/// checkpoints), which keeps every run reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g`; gradients are tracked iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.requires_grad = trainable;
                    g.leaf(t)
                })
                .collect(),
        )
    }

    /// Gradients of every bound parameter after a backward pass (zeros for
    /// parameters the loss does not touch).
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for (name, t) in self.iter() {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
            }
            h = (h ^ t.checksum()).wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Replaces values by name, requiring an exact name and shape match.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::DimensionMismatch(format!(
                "parameter names differ ({} vs {} entries)",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn fill(shape: &[usize], v: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = v);
    t
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), normal_tensor(rng, &[d_in, d_out], std)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row_bias(y, p[self.bias])
    }
}

/// Kernel-3 convolution along time.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub const KERNEL: usize = 3;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (c_in * Self::KERNEL) as f64).sqrt();
        Conv1d {
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(rng, &[c_out, c_in, Self::KERNEL], std),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p[self.weight], p[self.bias], self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), fill(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Post-norm residual feed-forward block: `LN(x + W2 gelu(W1 x))`.
#[derive(Debug, Clone)]
pub struct FeedForwardBlock {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForwardBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForwardBlock {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.down.forward(g, p, h)?;
        let r = g.add(x, h)?;
        self.norm.forward(g, p, r)
    }
}

/// Single-head scaled dot-product self-attention with residual and post-norm.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        AttentionBlock {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let d = g.shape(x)[1];
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = g.row_softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let o = self.out.forward(g, p, ctx)?;
        let r = g.add(x, o)?;
        self.norm.forward(g, p, r)
    }
}
