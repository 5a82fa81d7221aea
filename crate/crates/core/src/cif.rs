//! Serial continuous integrate-and-fire (CIF) alignment.
//!
//! Each acoustic frame carries a weight `α_t`. Weights are integrated left
//! to right; whenever the running total reaches the threshold `β` a token
//! fires, and the frame that crosses the threshold is split between the
//! token it completes and the next one. The fired token vector is the
//! weight-averaged sum of the frames (and frame pieces) it absorbed.
//!
//! With the firing pattern held fixed, every contribution `c_{t,k}` is an
//! affine function of the weights, so the recurrence is differentiable
//! with respect to both the weights and the frames.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Bound, Conv1d, LayerNorm, Linear, ParamStore};
use crate::diffcore::{CustomBackward, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Acoustic frames `a_1..a_M` with their duration.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// `M x d_a`
    pub features: Tensor,
    pub hop_ms: f64,
    pub utterance_id: String,
}

impl FrameSequence {
    pub fn new(features: Tensor, hop_ms: f64, utterance_id: impl Into<String>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape("FrameSequence", "features must be M x d"));
        }
        if !(hop_ms > 0.0) {
            return Err(Error::Config(format!("hop_ms must be positive, got {hop_ms}")));
        }
        Ok(FrameSequence {
            features,
            hop_ms,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Per-frame CIF weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights {
    pub alpha: Vec<f64>,
    pub scaled: bool,
    /// `Σα` before any teacher-forced scaling (the predicted length).
    pub source_sum: f64,
    /// Token count the weights were scaled to, if any.
    pub target: Option<usize>,
}

impl AlignmentWeights {
    pub fn unscaled(alpha: Vec<f64>) -> Self {
        let source_sum = alpha.iter().sum();
        AlignmentWeights {
            alpha,
            scaled: false,
            source_sum,
            target: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    FireIfAtLeastHalf,
    AlwaysFire,
    Discard,
}

impl FromStr for TailPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fire_if_at_least_half" | "half" => Ok(TailPolicy::FireIfAtLeastHalf),
            "always_fire" | "always" => Ok(TailPolicy::AlwaysFire),
            "discard" => Ok(TailPolicy::Discard),
            other => Err(Error::Config(format!("unknown tail policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CifConfig {
    pub beta: f64,
    pub tail_policy: TailPolicy,
    pub epsilon_residual: f64,
}

impl Default for CifConfig {
    fn default() -> Self {
        CifConfig {
            beta: 1.0,
            tail_policy: TailPolicy::FireIfAtLeastHalf,
            epsilon_residual: 1e-6,
        }
    }
}

/// How a contribution depends on the weights, given a fixed firing pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContributionKind {
    /// The whole frame weight: `c = α_t`.
    Whole,
    /// The piece that completes a token: `c = β − (earlier mass of the token)`.
    Complete,
    /// A full threshold's worth from one heavy frame: `c = β`.
    Full,
    /// What remains of a split frame: `c = α_t − complete − n·β`; `complete`
    /// indexes the completing contribution of the same frame.
    Leftover { complete: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub frame: usize,
    pub token: usize,
    pub weight: f64,
    pub kind: ContributionKind,
}

/// Result of integrate-and-fire over one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FiredAlignment {
    /// `N' x d_a`
    pub aligned: Tensor,
    /// Non-zero `c_{t,k}`, ordered by frame then token.
    pub contributions: Vec<Contribution>,
    pub n_predicted: f64,
    pub fired_count: usize,
    pub num_frames: usize,
}

impl FiredAlignment {
    /// Firing pattern `(frame, token, kind)` without weights; two alignments
    /// with equal signatures differ only smoothly.
    pub fn signature(&self) -> Vec<(usize, usize, ContributionKind)> {
        self.contributions
            .iter()
            .map(|c| (c.frame, c.token, c.kind))
            .collect()
    }

    /// `Σ_k c_{t,k}` for each frame.
    pub fn frame_totals(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_frames];
        for c in &self.contributions {
            w[c.frame] += c.weight;
        }
        w
    }
}

/// Word-level boundary pair for one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundary {
    pub token_index: usize,
    pub left_ms: f64,
    pub right_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundarySet {
    pub entries: Vec<Boundary>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `token_index<TAB>left_ms<TAB>right_ms`, three decimals, one line per token.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.entries {
            writeln!(out, "{}\t{:.3}\t{:.3}", b.token_index, b.left_ms, b.right_ms).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [idx, left, right] = fields.as_slice() else {
                return Err(format!("line {}: expected 3 tab-separated fields", lineno + 1));
            };
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))
            };
            entries.push(Boundary {
                token_index: idx
                    .parse()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))?,
                left_ms: parse_f(left)?,
                right_ms: parse_f(right)?,
            });
        }
        Ok(BoundarySet { entries })
    }

    /// Checks ordering and non-overlap within `tol` milliseconds.
    pub fn is_consistent(&self, tol: f64) -> bool {
        self.entries.iter().all(|b| b.left_ms <= b.right_ms + tol)
            && self.entries.windows(2).all(|w| {
                w[0].token_index < w[1].token_index && w[0].right_ms <= w[1].left_ms + tol
            })
    }
}

/// `α_t = sigmoid(w · LN(Conv1D_k3(A))_t + b)`.
#[derive(Debug, Clone)]
pub struct WeightPredictor {
    pub conv: Conv1d,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl WeightPredictor {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_a: usize, rng: &mut R) -> Self {
        WeightPredictor {
            conv: Conv1d::new(store, &format!("{name}.conv"), d_a, d_a, 1, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_a),
            proj: Linear::new(store, &format!("{name}.proj"), d_a, 1, rng),
        }
    }

    /// Input channel count expected by the convolution.
    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.conv.weight).shape()[1]
    }

    /// Returns `α` as a length-`M` vector node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let m = g.shape(features)[0];
        let h = self.conv.forward(g, p, features)?;
        let h = self.norm.forward(g, p, h)?;
        let z = self.proj.forward(g, p, h)?;
        let a = g.sigmoid(z)?;
        g.reshape(a, &[m])
    }
}

/// Predicts CIF weights for one utterance.
pub fn predict_weights(
    frames: &FrameSequence,
    predictor: &WeightPredictor,
    store: &ParamStore,
) -> Result<AlignmentWeights> {
    if predictor.dim(store) != frames.dim() {
        return Err(Error::shape(
            "predict_weights",
            format!(
                "predictor expects d_a = {}, frames have {}",
                predictor.dim(store),
                frames.dim()
            ),
        ));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(frames.features.clone());
    let a = predictor.forward(&mut g, &p, x)?;
    Ok(AlignmentWeights::unscaled(g.data(a).to_vec()))
}

/// Teacher-forced rescaling `α'_t = α_t · N / Σα`.
pub fn scale_weights(alpha: &AlignmentWeights, n_target: usize) -> Result<AlignmentWeights> {
    let sum = alpha.sum();
    if sum < 1e-9 {
        return Err(Error::DegenerateWeights(sum));
    }
    let k = n_target as f64 / sum;
    Ok(AlignmentWeights {
        alpha: alpha.alpha.iter().map(|a| a * k).collect(),
        scaled: true,
        source_sum: alpha.source_sum,
        target: Some(n_target),
    })
}

/// Differentiable counterpart of [`scale_weights`] on a weight vector node.
pub fn scale_weights_graph(g: &mut Graph, alpha: Var, n_target: usize) -> Result<Var> {
    let s = g.sum(alpha)?;
    if g.scalar(s) < 1e-9 {
        return Err(Error::DegenerateWeights(g.scalar(s)));
    }
    let unit = g.div_scalar(alpha, s)?;
    g.scale(unit, n_target as f64)
}

/// `|Σα − N|`, with a zero subgradient at the optimum.
pub fn quantity_loss(alpha: &AlignmentWeights, n_target: usize) -> f64 {
    (alpha.sum() - n_target as f64).abs()
}

pub fn quantity_loss_graph(g: &mut Graph, alpha: Var, n_target: usize) -> Result<Var> {
    let s = g.sum(alpha)?;
    let d = g.add_scalar(s, -(n_target as f64))?;
    g.abs(d)
}

struct FirePlan {
    contributions: Vec<Contribution>,
    fired: usize,
}

/// The serial recurrence. Returns the contribution list of every fired token.
fn plan_firing(alpha: &[f64], config: &CifConfig, target: Option<usize>) -> Result<FirePlan> {
    let beta = config.beta;
    let eps = config.epsilon_residual;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("CIF threshold must be positive, got {beta}")));
    }
    if let Some(bad) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(Error::NonFiniteValue(format!("CIF weight {bad}")));
    }
    let mut fired_contribs: Vec<Contribution> = Vec::new();
    let mut pending: Vec<Contribution> = Vec::new();
    let mut fired = 0usize;
    let mut s = 0.0;

    let fire = |pending: &mut Vec<Contribution>, out: &mut Vec<Contribution>, fired: &mut usize| {
        out.append(pending);
        *fired += 1;
    };

    for (t, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        if s + a < beta {
            pending.push(Contribution {
                frame: t,
                token: fired,
                weight: a,
                kind: ContributionKind::Whole,
            });
            s += a;
            // rounding can leave the accumulator a hair under β
            if s >= beta - eps {
                fire(&mut pending, &mut fired_contribs, &mut fired);
                s = 0.0;
            }
            continue;
        }
        let r = beta - s;
        pending.push(Contribution {
            frame: t,
            token: fired,
            weight: r,
            kind: ContributionKind::Complete,
        });
        fire(&mut pending, &mut fired_contribs, &mut fired);
        let complete_idx = fired_contribs.len() - 1;
        let mut rest = (a - r).max(0.0);
        while rest >= beta {
            fired_contribs.push(Contribution {
                frame: t,
                token: fired,
                weight: beta,
                kind: ContributionKind::Full,
            });
            fired += 1;
            rest -= beta;
        }
        s = 0.0;
        if rest > 0.0 {
            pending.push(Contribution {
                frame: t,
                token: fired,
                weight: rest,
                kind: ContributionKind::Leftover {
                    complete: complete_idx,
                },
            });
            s = rest;
            if s >= beta - eps {
                fire(&mut pending, &mut fired_contribs, &mut fired);
                s = 0.0;
            }
        }
    }

    match target {
        Some(n) => {
            if fired + 1 == n && !pending.is_empty() {
                fire(&mut pending, &mut fired_contribs, &mut fired);
            }
            if fired != n {
                return Err(Error::FiringCountMismatch { fired, target: n });
            }
        }
        None => {
            let fire_tail = !pending.is_empty()
                && match config.tail_policy {
                    TailPolicy::FireIfAtLeastHalf => s >= beta / 2.0,
                    TailPolicy::AlwaysFire => s > eps,
                    TailPolicy::Discard => false,
                };
            if fire_tail {
                fire(&mut pending, &mut fired_contribs, &mut fired);
            }
        }
    }
    if fired == 0 {
        return Err(Error::EmptyOutput);
    }
    Ok(FirePlan {
        contributions: fired_contribs,
        fired,
    })
}

fn combine(contribs: &[Contribution], frames: &[f64], d: usize, fired: usize) -> Vec<f64> {
    let mut out = vec![0.0; fired * d];
    for c in contribs {
        let src = &frames[c.frame * d..(c.frame + 1) * d];
        for (o, x) in out[c.token * d..(c.token + 1) * d].iter_mut().zip(src) {
            *o += c.weight * x;
        }
    }
    out
}

/// Runs the CIF recurrence on plain values. Weights produced by
/// [`scale_weights`] fire exactly their target count; unscaled weights
/// resolve the trailing partial token with the configured tail policy.
pub fn integrate_and_fire(
    frames: &FrameSequence,
    alpha: &AlignmentWeights,
    config: &CifConfig,
) -> Result<FiredAlignment> {
    let m = frames.len();
    if alpha.alpha.len() != m {
        return Err(Error::shape(
            "integrate_and_fire",
            format!("{} weights for {m} frames", alpha.alpha.len()),
        ));
    }
    let plan = plan_firing(&alpha.alpha, config, alpha.target)?;
    let d = frames.dim();
    let aligned = combine(&plan.contributions, frames.features.data(), d, plan.fired);
    Ok(FiredAlignment {
        aligned: Tensor::matrix(plan.fired, d, aligned)?,
        contributions: plan.contributions,
        n_predicted: alpha.source_sum,
        fired_count: plan.fired,
        num_frames: m,
    })
}

struct CifBackward {
    contributions: Vec<Contribution>,
    d: usize,
}

impl CustomBackward for CifBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let (alpha, frames) = (inputs[0], inputs[1]);
        let d = self.d;
        let fd = frames.data();
        let cs = &self.contributions;

        let mut d_frames = vec![0.0; frames.numel()];
        let mut adj: Vec<f64> = Vec::with_capacity(cs.len());
        for c in cs {
            let gk = &grad[c.token * d..(c.token + 1) * d];
            let a = &fd[c.frame * d..(c.frame + 1) * d];
            adj.push(gk.iter().zip(a).map(|(x, y)| x * y).sum());
            for (o, gv) in d_frames[c.frame * d..(c.frame + 1) * d].iter_mut().zip(gk) {
                *o += c.weight * gv;
            }
        }

        // first contribution index of each token
        let mut token_start = vec![0usize; cs.last().map_or(0, |c| c.token + 1)];
        for (i, c) in cs.iter().enumerate().rev() {
            token_start[c.token] = i;
        }

        let mut d_alpha = vec![0.0; alpha.numel()];
        for i in (0..cs.len()).rev() {
            let c = cs[i];
            let a = adj[i];
            match c.kind {
                ContributionKind::Whole => d_alpha[c.frame] += a,
                ContributionKind::Full => {}
                ContributionKind::Leftover { complete } => {
                    d_alpha[c.frame] += a;
                    adj[complete] -= a;
                }
                ContributionKind::Complete => {
                    for j in token_start[c.token]..i {
                        adj[j] -= a;
                    }
                }
            }
        }
        vec![d_alpha, d_frames]
    }
}

/// Differentiable integrate-and-fire: `alpha` is a length-`M` node, `frames`
/// an `M x d` node. Pass `target` for teacher-forced firing.
pub fn integrate_and_fire_graph(
    g: &mut Graph,
    frames: Var,
    alpha: Var,
    config: &CifConfig,
    target: Option<usize>,
) -> Result<(Var, FiredAlignment)> {
    let (m, d) = g.value(frames).dims2();
    if g.value(alpha).numel() != m || g.value(frames).rank() != 2 {
        return Err(Error::shape(
            "integrate_and_fire",
            format!("{:?} weights for {:?} frames", g.shape(alpha), g.shape(frames)),
        ));
    }
    let plan = plan_firing(g.data(alpha), config, target)?;
    let aligned = Tensor::matrix(
        plan.fired,
        d,
        combine(&plan.contributions, g.data(frames), d, plan.fired),
    )?;
    let fired = FiredAlignment {
        aligned: aligned.clone(),
        contributions: plan.contributions.clone(),
        n_predicted: g.data(alpha).iter().sum(),
        fired_count: plan.fired,
        num_frames: m,
    };
    let v = g.custom(
        &[alpha, frames],
        aligned,
        Box::new(CifBackward {
            contributions: plan.contributions,
            d,
        }),
    )?;
    Ok((v, fired))
}

/// Sub-frame word boundaries from the contribution map.
///
/// A token's left edge lies inside its first frame at the fraction of that
/// frame's weight already claimed by earlier tokens; its right edge lies in
/// its last frame at the fraction claimed by it and earlier tokens.
pub fn extract_boundaries(fired: &FiredAlignment, hop_ms: f64) -> BoundarySet {
    let totals = fired.frame_totals();
    let n = fired.fired_count;
    let mut first: Vec<Option<usize>> = vec![None; n];
    let mut last: Vec<Option<usize>> = vec![None; n];
    // claimed[t] accumulates Σ_{k' ≤ k} c_{t,k'} while walking tokens in order
    let mut before_first = vec![0.0; n];
    let mut through_last = vec![0.0; n];
    let mut claimed = vec![0.0; fired.num_frames];
    for c in &fired.contributions {
        if c.weight <= 0.0 {
            continue;
        }
        if first[c.token].is_none() {
            first[c.token] = Some(c.frame);
            before_first[c.token] = claimed[c.frame];
        }
        claimed[c.frame] += c.weight;
        last[c.token] = Some(c.frame);
        through_last[c.token] = claimed[c.frame];
    }
    let frac = |t: usize, mass: f64| {
        if totals[t] < 1e-12 {
            0.0
        } else {
            (mass / totals[t]).clamp(0.0, 1.0)
        }
    };
    let entries = (0..n)
        .filter_map(|k| {
            let (tf, tl) = (first[k]?, last[k]?);
            Some(Boundary {
                token_index: k,
                left_ms: (tf as f64 + frac(tf, before_first[k])) * hop_ms,
                right_ms: (tl as f64 + frac(tl, through_last[k])) * hop_ms,
            })
        })
        .collect();
    BoundarySet { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_frames(m: usize) -> FrameSequence {
        FrameSequence::new(Tensor::identity(m), 20.0, "u").unwrap()
    }

    #[test]
    fn hand_trace_two_tokens() {
        let frames = unit_frames(3);
        let alpha = AlignmentWeights::unscaled(vec![0.5, 0.7, 0.8]);
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        assert_eq!(f.fired_count, 2);
        let expect = [[0.5, 0.5, 0.0], [0.0, 0.2, 0.8]];
        for (k, row) in expect.iter().enumerate() {
            for (x, y) in f.aligned.row(k).iter().zip(row) {
                assert!((x - y).abs() < 1e-12, "{:?}", f.aligned);
            }
        }
        assert!((f.n_predicted - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_frame_per_token_after_scaling() {
        let frames = FrameSequence::new(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            20.0,
            "u",
        )
        .unwrap();
        let alpha = scale_weights(&AlignmentWeights::unscaled(vec![0.5, 0.5, 0.5]), 3).unwrap();
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        assert_eq!(f.aligned, frames.features);
    }

    #[test]
    fn constant_weights_fire_twice() {
        let frames = unit_frames(5);
        let alpha = AlignmentWeights::unscaled(vec![0.4; 5]);
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        assert_eq!(f.fired_count, 2);
        let total: f64 = f.contributions.iter().map(|c| c.weight).sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn heavy_frame_fires_repeatedly() {
        let frames = unit_frames(2);
        let alpha = AlignmentWeights::unscaled(vec![0.5, 2.7]);
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        // 0.5 + 0.5 | 1.0 | 1.0 | 0.2 tail discarded (< β/2)
        assert_eq!(f.fired_count, 3);
        assert!(f.contributions.iter().any(|c| c.kind == ContributionKind::Full));
        assert!((f.aligned.get2(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_policies() {
        let frames = unit_frames(3);
        let alpha = AlignmentWeights::unscaled(vec![0.6, 0.6, 0.2]);
        let run = |policy| {
            let cfg = CifConfig {
                tail_policy: policy,
                ..CifConfig::default()
            };
            integrate_and_fire(&frames, &alpha, &cfg).map(|f| f.fired_count)
        };
        // residual 0.4 after one firing
        assert_eq!(run(TailPolicy::FireIfAtLeastHalf).unwrap(), 1);
        assert_eq!(run(TailPolicy::AlwaysFire).unwrap(), 2);
        assert_eq!(run(TailPolicy::Discard).unwrap(), 1);

        let tiny = AlignmentWeights::unscaled(vec![0.1, 0.1, 0.1]);
        let cfg = CifConfig {
            tail_policy: TailPolicy::Discard,
            ..CifConfig::default()
        };
        assert!(matches!(
            integrate_and_fire(&frames, &tiny, &cfg),
            Err(Error::EmptyOutput)
        ));
    }

    #[test]
    fn scale_examples() {
        let s = scale_weights(&AlignmentWeights::unscaled(vec![0.5, 0.5]), 2).unwrap();
        assert_eq!(s.alpha, vec![1.0, 1.0]);
        let s = scale_weights(&AlignmentWeights::unscaled(vec![0.2, 0.3, 0.5]), 2).unwrap();
        for (x, y) in s.alpha.iter().zip([0.4, 0.6, 1.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        let same = scale_weights(&AlignmentWeights::unscaled(vec![0.25, 0.75, 1.0]), 2).unwrap();
        assert_eq!(same.alpha, vec![0.25, 0.75, 1.0]);
        assert!(matches!(
            scale_weights(&AlignmentWeights::unscaled(vec![0.0, 1e-12]), 2),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn quantity_examples() {
        let q = |a: Vec<f64>, n| quantity_loss(&AlignmentWeights::unscaled(a), n);
        assert!((q(vec![2.0, 3.3], 5) - 0.3).abs() < 1e-12);
        assert_eq!(q(vec![2.5, 2.5], 5), 0.0);
        assert_eq!(q(vec![1.0, 1.0], 3), 1.0);
    }

    #[test]
    fn boundaries_follow_claimed_fractions() {
        let frames = unit_frames(3);
        let alpha = AlignmentWeights::unscaled(vec![0.5, 0.7, 0.8]);
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        let b = extract_boundaries(&f, 20.0);
        // frame 2 holds 0.5 for token 1 and 0.2 for token 2 out of 0.7
        let split = 20.0 + 20.0 * 0.5 / 0.7;
        assert_eq!(b.len(), 2);
        assert!((b.entries[0].left_ms - 0.0).abs() < 1e-9);
        assert!((b.entries[0].right_ms - split).abs() < 1e-9);
        assert!((b.entries[1].left_ms - split).abs() < 1e-9);
        assert!((b.entries[1].right_ms - 60.0).abs() < 1e-9);
    }

    #[test]
    fn single_token_spans_utterance() {
        let frames = unit_frames(4);
        let alpha = AlignmentWeights::unscaled(vec![0.25; 4]);
        let f = integrate_and_fire(&frames, &alpha, &CifConfig::default()).unwrap();
        let b = extract_boundaries(&f, 20.0);
        assert_eq!(b.entries, vec![Boundary { token_index: 0, left_ms: 0.0, right_ms: 80.0 }]);
    }

    #[test]
    fn boundary_text_round_trip() {
        let b = BoundarySet {
            entries: vec![
                Boundary { token_index: 0, left_ms: 0.0, right_ms: 12.5 },
                Boundary { token_index: 1, left_ms: 12.5, right_ms: 40.125 },
            ],
        };
        let text = b.to_text();
        assert_eq!(text, "0\t0.000\t12.500\n1\t12.500\t40.125\n");
        assert_eq!(BoundarySet::parse(&text).unwrap(), b);
        assert!(BoundarySet::parse("0\t1.0").is_err());
    }

    #[test]
    fn weight_count_mismatch() {
        let frames = unit_frames(3);
        let alpha = AlignmentWeights::unscaled(vec![0.5; 2]);
        assert!(integrate_and_fire(&frames, &alpha, &CifConfig::default()).is_err());
    }
}
