use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::nn::{normal_tensor, AttentionBlock, Bound, FeedForwardBlock, ParamId, ParamStore};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One frozen layer: optional self-attention, then a feed-forward block.
#[derive(Debug, Clone)]
pub struct LmLayer {
    pub attention: Option<AttentionBlock>,
    pub ff: FeedForwardBlock,
}

impl LmLayer {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = match &self.attention {
            Some(a) => a.forward(g, p, x)?,
            None => x,
        };
        self.ff.forward(g, p, h)
    }
}

/// Construction knobs for [`LinguisticModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinguisticSpec {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub attention: bool,
    /// Norm of the direction shared by every embedding, relative to the
    /// token-specific part.
    pub anisotropy: f64,
    pub position_scale: f64,
    /// Multiplier on each block's output projection.
    pub residual_scale: f64,
}

/// Toy layered language model. Embeddings double as the output head.
#[derive(Debug, Clone)]
pub struct LinguisticModel {
    pub store: ParamStore,
    pub embedding: ParamId,
    pub layers: Vec<LmLayer>,
    pub position_scale: f64,
    frozen: bool,
}

fn unit_direction_off_mean<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    // layer norm removes the all-ones component, so keep clear of it
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mean = v.iter().sum::<f64>() / d as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let dot: f64 = v.iter().zip(unit).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(unit).for_each(|(a, b)| *a -= dot * b);
}

pub fn sinusoidal_positions(n: usize, d: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    let data = t.data_mut();
    for pos in 0..n {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + j] = scale * if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl LinguisticModel {
    pub fn new<R: Rng>(spec: &LinguisticSpec, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let d = spec.dim;
        let mut emb = normal_tensor(rng, &[spec.vocab, d], 1.0);
        let shared = unit_direction_off_mean(d, rng);
        let k = spec.anisotropy * (d as f64).sqrt();
        for row in emb.data_mut().chunks_mut(d) {
            // token-specific part orthogonal to the shared direction, so the
            // shared part adds the same amount to every head logit
            project_out(row, &shared);
            for (x, s) in row.iter_mut().zip(&shared) {
                *x += k * s;
            }
        }
        let embedding = store.add("lm.embedding", emb);
        let layers = (0..spec.layers)
            .map(|l| {
                let attention = spec
                    .attention
                    .then(|| AttentionBlock::new(&mut store, &format!("lm.layer{l}.attn"), d, rng));
                let ff = FeedForwardBlock::new(&mut store, &format!("lm.layer{l}.ff"), d, spec.hidden, rng);
                // blocks read only the token-specific subspace
                let up = store.get_mut(ff.up.weight);
                let h = spec.hidden;
                for c in 0..h {
                    let mut col: Vec<f64> = (0..d).map(|r| up.get2(r, c)).collect();
                    project_out(&mut col, &shared);
                    for (r, v) in col.into_iter().enumerate() {
                        up.data_mut()[r * h + c] = v;
                    }
                }
                store
                    .get_mut(ff.down.weight)
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w *= spec.residual_scale);
                LmLayer { attention, ff }
            })
            .collect();
        LinguisticModel {
            store,
            embedding,
            layers,
            position_scale: spec.position_scale,
            frozen: true,
        }
    }

    pub fn vocab(&self) -> usize {
        self.store.get(self.embedding).shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.store.get(self.embedding).shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Allows a pretraining stage to update the parameters.
    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Places the parameters on `g`; tracked only while unfrozen.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.store.bind(g, !self.frozen)
    }

    /// Embeddings plus positions: the depth-0 states.
    pub fn embed(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        let e = g.gather_rows(p[self.embedding], ids)?;
        let pos = g.constant(sinusoidal_positions(ids.len(), self.dim(), self.position_scale));
        g.add(e, pos)
    }

    /// Applies layers `from+1 ..= to` (1-based) to `h`.
    pub fn run_layers(&self, g: &mut Graph, p: &Bound, mut h: Var, from: usize, to: usize) -> Result<Var> {
        if to > self.depth() || from > to {
            return Err(Error::DepthOutOfRange {
                depth: to.max(from),
                max: self.depth(),
            });
        }
        for layer in &self.layers[from..to] {
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Tied output head: `h · Eᵀ`.
    pub fn head(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        g.matmul_bt(h, p[self.embedding])
    }

    /// States after layer `depth` for a token sequence (0 = embeddings).
    pub fn layer_output(&self, ids: &[usize], depth: usize) -> Result<Tensor> {
        if depth > self.depth() {
            return Err(Error::DepthOutOfRange {
                depth,
                max: self.depth(),
            });
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let h = self.embed(&mut g, &p, ids)?;
        let h = self.run_layers(&mut g, &p, h, 0, depth)?;
        Ok(g.value(h).clone())
    }
}
