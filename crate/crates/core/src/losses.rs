//! Training objectives: cosine baseline, symmetric InfoNCE, subword
//! cross-entropy through the tied output head, and their weighted total.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlignMode {
    #[serde(rename = "cos")]
    Cosine,
    #[serde(rename = "infonce")]
    InfoNce,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Cosine => "cos",
            AlignMode::InfoNce => "infonce",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cos" | "cosine" => Ok(AlignMode::Cosine),
            "infonce" | "info_nce" => Ok(AlignMode::InfoNce),
            other => Err(Error::Config(format!("unknown align mode `{other}` (cos|infonce)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction `{other}` (sum|mean)"))),
        }
    }
}

/// Relative weights of the alignment, quantity and subword terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub quantity: f64,
    pub subword: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            align: 1.0,
            quantity: 1.0,
            subword: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub align_mode: AlignMode,
    pub weights: LossWeights,
    pub cosine_reduction: Reduction,
    /// Also contrast against tokens of the other utterances in a batch.
    pub cross_utterance_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            align_mode: AlignMode::InfoNce,
            weights: LossWeights::default(),
            cosine_reduction: Reduction::Sum,
            cross_utterance_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        let w = self.weights;
        if [w.align, w.quantity, w.subword].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {w:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub align: f64,
    pub quantity: f64,
    pub subword: f64,
    pub total: f64,
}

fn same_rows(g: &Graph, op: &'static str, x: Var, y: Var) -> Result<()> {
    if g.value(x).rank() != 2 || g.shape(x) != g.shape(y) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    Ok(())
}

/// `Σ_i (1 − cos(â_i, l_i))`, or the mean over rows.
pub fn cosine_align_loss(g: &mut Graph, a_hat: Var, l: Var, reduction: Reduction) -> Result<Var> {
    same_rows(g, "cosine_align_loss", a_hat, l)?;
    let n = g.shape(a_hat)[0] as f64;
    let an = g.row_normalize(a_hat)?;
    let ln = g.row_normalize(l)?;
    let cos = g.row_dot(an, ln)?;
    let s = g.sum(cos)?;
    let neg = g.scale(s, -1.0)?;
    let loss = g.add_scalar(neg, n)?;
    match reduction {
        Reduction::Sum => Ok(loss),
        Reduction::Mean => g.scale(loss, 1.0 / n),
    }
}

/// InfoNCE of `x` against `y`: row `i` of `x` must pick row `i` of `y` out
/// of all rows of `y` (plus any rows of `extra_negatives`), with cosine
/// logits divided by `tau`.
pub fn info_nce(g: &mut Graph, x: Var, y: Var, tau: f64, extra_negatives: Option<Var>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    same_rows(g, "info_nce", x, y)?;
    let n = g.shape(x)[0];
    let candidates = match extra_negatives {
        Some(neg) => g.concat_rows(&[y, neg])?,
        None => y,
    };
    let xn = g.row_normalize(x)?;
    let cn = g.row_normalize(candidates)?;
    let sim = g.matmul_bt(xn, cn)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// `½ InfoNCE(Â, L) + ½ InfoNCE(L, Â)`. With cross-utterance negatives,
/// `negatives = (other Â rows, other L rows)`.
pub fn aligned_token_similarity_loss(
    g: &mut Graph,
    a_hat: Var,
    l: Var,
    tau: f64,
    negatives: Option<(Var, Var)>,
) -> Result<Var> {
    let forward = info_nce(g, a_hat, l, tau, negatives.map(|n| n.1))?;
    let backward = info_nce(g, l, a_hat, tau, negatives.map(|n| n.0))?;
    let s = g.add(forward, backward)?;
    g.scale(s, 0.5)
}

/// Mean cross-entropy of `top_states · Eᵀ` against the gold ids, where `E`
/// is the (frozen) embedding table doubling as output projection.
pub fn subword_loss(g: &mut Graph, top_states: Var, embedding: Var, gold_ids: &[usize]) -> Result<Var> {
    let logits = g.matmul_bt(top_states, embedding)?;
    subword_loss_from_logits(g, logits, gold_ids)
}

pub fn subword_loss_from_logits(g: &mut Graph, logits: Var, gold_ids: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, gold_ids)
}

/// Combines component values into a [`LossBundle`].
pub fn total_loss(align: f64, quantity: f64, subword: f64, config: &LossConfig) -> Result<LossBundle> {
    for (name, v) in [("align", align), ("quantity", quantity), ("subword", subword)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(name));
        }
    }
    let w = config.weights;
    Ok(LossBundle {
        align,
        quantity,
        subword,
        total: w.align * align + w.quantity * quantity + w.subword * subword,
    })
}

/// Graph form of [`total_loss`]; zero-weight terms are left out entirely.
pub fn total_loss_graph(g: &mut Graph, align: Var, quantity: Var, subword: Var, config: &LossConfig) -> Result<Var> {
    let w = config.weights;
    let mut acc: Option<Var> = None;
    for (v, k) in [(align, w.align), (quantity, w.quantity), (subword, w.subword)] {
        if k == 0.0 {
            continue;
        }
        let term = if k == 1.0 { v } else { g.scale(v, k)? };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let z = g.scale(align, 0.0)?;
            Ok(z)
        }
    }
}

fn eval2(x: &Tensor, y: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = f(&mut g, xv, yv)?;
    Ok(g.scalar(out))
}

/// Value-only conveniences over plain tensors.
pub mod value {
    use super::*;

    pub fn cosine_align_loss(a_hat: &Tensor, l: &Tensor, reduction: Reduction) -> Result<f64> {
        eval2(a_hat, l, |g, x, y| super::cosine_align_loss(g, x, y, reduction))
    }

    pub fn info_nce(x: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
        eval2(x, y, |g, x, y| super::info_nce(g, x, y, tau, None))
    }

    pub fn aligned_token_similarity_loss(a_hat: &Tensor, l: &Tensor, tau: f64) -> Result<f64> {
        eval2(a_hat, l, |g, x, y| super::aligned_token_similarity_loss(g, x, y, tau, None))
    }

    pub fn subword_loss_from_logits(logits: &Tensor, gold_ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let out = super::subword_loss_from_logits(&mut g, z, gold_ids)?;
        Ok(g.scalar(out))
    }
}

pub const LOSS_LOG_HEADER: &str = "step,align,quantity,subword,total,lr";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub bundle: LossBundle,
    pub lr: f64,
}

impl LossLogRow {
    pub fn to_csv(&self) -> String {
        let b = &self.bundle;
        format!(
            "{},{},{},{},{},{}",
            self.step, b.align, b.quantity, b.subword, b.total, self.lr
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
        Ok(LossLogRow {
            step: f[0].parse().map_err(|e| format!("`{}`: {e}", f[0]))?,
            bundle: LossBundle {
                align: num(f[1])?,
                quantity: num(f[2])?,
                subword: num(f[3])?,
                total: num(f[4])?,
            },
            lr: num(f[5])?,
        })
    }
}

pub fn write_loss_log<W: Write>(mut out: W, rows: &[LossLogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn parse_loss_log(text: &str) -> std::result::Result<Vec<LossLogRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == LOSS_LOG_HEADER => {}
        other => return Err(format!("bad loss log header {other:?}")),
    }
    lines.filter(|l| !l.is_empty()).map(LossLogRow::parse).collect()
}
