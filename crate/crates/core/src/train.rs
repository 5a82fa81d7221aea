//! Optimization: warmup/decay schedule, AdamW, alignment training,
//! classifier fine-tuning and checkpoint evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cif::{
    extract_boundaries, integrate_and_fire, integrate_and_fire_graph, predict_weights, quantity_loss_graph,
    scale_weights, scale_weights_graph, FiredAlignment,
};
use crate::diffcore::nn::{Bound, ParamStore};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    boundary_errors, classification_scores, diagonality_score, similarity_heatmap, tolerance_accuracy,
    BoundaryErrors, MetricsReport, CUTOFFS_MS,
};
use crate::losses::{self, AlignMode, LossBundle, LossConfig, LossLogRow};
use crate::models::{
    argmax, encode_acoustic, graft_forward, inference_forward, linguistic_targets, top5_candidates, ClassifierHead,
    GraftedModel, LinguisticModel, NUM_CLASSES,
};
use crate::synthdata::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Schedule endpoint; `None` means epochs x batches per epoch.
    pub total_steps: Option<usize>,
    /// Stop after this many updates (the schedule still spans `total_steps`).
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            warmup_steps: 200,
            total_steps: None,
            max_steps: None,
            batch_size: 16,
            epochs: 26,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batches_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, corpus_len: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self
                .total_steps
                .unwrap_or(self.epochs * self.batches_per_epoch(corpus_len)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("base_lr, batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and clip_norm > 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    if s.warmup_steps >= s.total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {} must be below total_steps {}",
            s.warmup_steps, s.total_steps
        )));
    }
    Ok(if step < s.warmup_steps {
        s.base_lr * step as f64 / s.warmup_steps as f64
    } else {
        s.base_lr * (s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64
    })
}

/// Adam with decoupled weight decay, one moment buffer pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            lr_scale: vec![1.0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn from_config(store: &ParamStore, c: &TrainConfig) -> Self {
        Self::new(store, c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    }

    /// Multiplies the learning rate of every parameter whose name starts
    /// with `prefix`.
    pub fn scale_lr(&mut self, store: &ParamStore, prefix: &str, factor: f64) {
        for (i, (name, _)) in store.iter().enumerate() {
            if name.starts_with(prefix) {
                self.lr_scale[i] *= factor;
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.values_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = lr * self.lr_scale[i];
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(&grads[i]).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        losses::write_loss_log(&mut buf, &self.rows).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Graph nodes for one teacher-forced utterance.
pub struct AlignedUtterance {
    pub alpha: Var,
    pub a_hat: Var,
    pub fired: FiredAlignment,
}

/// Encode, predict weights, scale to `n` and fire exactly `n` tokens.
pub fn align_utterance(g: &mut Graph, model: &GraftedModel, p: &Bound, raw: &Tensor, n: usize) -> Result<AlignedUtterance> {
    let x = g.constant(raw.clone());
    let frames = model.acoustic.forward(g, p, x)?;
    let alpha = model.predictor.forward(g, p, frames)?;
    let scaled = scale_weights_graph(g, alpha, n)?;
    let (a_hat, fired) = integrate_and_fire_graph(g, frames, scaled, &model.cif, Some(n))?;
    Ok(AlignedUtterance { alpha, a_hat, fired })
}

fn batch_objective(
    g: &mut Graph,
    model: &GraftedModel,
    p: &Bound,
    lp: &Bound,
    batch: &[(&Utterance, &Tensor)],
    cfg: &LossConfig,
) -> Result<(Var, [f64; 3])> {
    let mut aligned = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (u, li) in batch {
        aligned.push(align_utterance(g, model, p, &u.raw_frames, u.num_tokens())?);
        targets.push(g.constant((*li).clone()));
    }
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = [0.0; 3];
    for (i, (u, _)) in batch.iter().enumerate() {
        let (a_hat, l) = (aligned[i].a_hat, targets[i]);
        let align = match cfg.align_mode {
            AlignMode::Cosine => losses::cosine_align_loss(g, a_hat, l, cfg.cosine_reduction)?,
            AlignMode::InfoNce => {
                let negatives = if cfg.cross_utterance_negatives && batch.len() > 1 {
                    let others: Vec<usize> = (0..batch.len()).filter(|&j| j != i).collect();
                    let na: Vec<Var> = others.iter().map(|&j| aligned[j].a_hat).collect();
                    let nl: Vec<Var> = others.iter().map(|&j| targets[j]).collect();
                    Some((g.concat_rows(&na)?, g.concat_rows(&nl)?))
                } else {
                    None
                };
                losses::aligned_token_similarity_loss(g, a_hat, l, cfg.tau, negatives)?
            }
        };
        let quantity = quantity_loss_graph(g, aligned[i].alpha, u.num_tokens())?;
        let subword = if cfg.weights.subword > 0.0 {
            let (_, logits) = model.graft(g, lp, a_hat)?;
            losses::subword_loss_from_logits(g, logits, &u.token_ids)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        for (s, v) in sums.iter_mut().zip([align, quantity, subword]) {
            *s += g.scalar(v);
        }
        totals.push(losses::total_loss_graph(g, align, quantity, subword, cfg)?);
    }
    let stacked = g.concat_rows(&totals)?;
    let mean = g.mean(stacked)?;
    let k = batch.len() as f64;
    Ok((mean, sums.map(|s| s / k)))
}

fn check_finite_grads(grads: &[Vec<f64>], step: usize) -> Result<()> {
    if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
        return Err(Error::DivergedLoss { step, value: *bad });
    }
    Ok(())
}

/// Trains the acoustic encoder and weight predictor against the frozen
/// language model. On `DivergedLoss` the model keeps its last good
/// parameters.
pub fn train_align(corpus: &[Utterance], model: &mut GraftedModel, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if !model.linguistic.is_frozen() {
        return Err(Error::Config("the language model must be frozen before alignment training".into()));
    }
    let depth = model.graft_depth();
    let targets: Vec<Tensor> = corpus
        .iter()
        .map(|u| linguistic_targets(&u.token_ids, depth, &model.linguistic).map(|t| t.states))
        .collect::<Result<_>>()?;
    let schedule = config.schedule(corpus.len());
    let limit = config.max_steps.unwrap_or(schedule.total_steps).min(schedule.total_steps);
    let mut opt = AdamW::from_config(&model.trainable, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            step += 1;
            let batch: Vec<(&Utterance, &Tensor)> = chunk.iter().map(|&i| (&corpus[i], &targets[i])).collect();
            let mut g = Graph::new();
            let p = model.trainable.bind(&mut g, true);
            let lp = model.linguistic.bind(&mut g);
            let (total, parts) = match batch_objective(&mut g, model, &p, &lp, &batch, &config.loss) {
                Err(Error::NonFiniteValue(_)) => {
                    return Err(Error::DivergedLoss { step, value: f64::NAN });
                }
                other => other?,
            };
            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(Error::DivergedLoss { step, value });
            }
            g.backward(total)?;
            let mut grads = model.trainable.grads(&g, &p);
            check_finite_grads(&grads, step)?;
            clip_global_norm(&mut grads, config.clip_norm);
            let lr = lr_schedule(step, &schedule)?;
            opt.step(&mut model.trainable, &grads, lr);
            log.rows.push(LossLogRow {
                step,
                bundle: LossBundle {
                    align: parts[0],
                    quantity: parts[1],
                    subword: parts[2],
                    total: value,
                },
                lr,
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// After fitting the head, also update the encoder and weight
    /// predictor jointly with it for `joint_epochs` at `joint_lr`.
    pub unfreeze_acoustic: bool,
    pub joint_epochs: usize,
    pub joint_lr: f64,
    /// Shuffle training labels across utterances (a sanity control).
    pub permute_labels: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-2,
            epochs: 1500,
            batch_size: 32,
            weight_decay: 0.0,
            unfreeze_acoustic: false,
            joint_epochs: 30,
            joint_lr: 3e-3,
            permute_labels: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneLog {
    /// `(step, cross-entropy, lr)`
    pub rows: Vec<(usize, f64, f64)>,
}

impl FinetuneLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,cross_entropy,lr\n");
        for (s, l, lr) in &self.rows {
            out.push_str(&format!("{s},{l},{lr}\n"));
        }
        out
    }
}

/// Mean-pooled top states of the inference path for one utterance.
pub fn pooled_features(model: &GraftedModel, u: &Utterance) -> Result<Vec<f64>> {
    let inf = inference_forward(&u.raw_frames, u.raw_hop_ms, model)?;
    let (n, d) = inf.top_states.dims2();
    let mut pooled = vec![0.0; d];
    for row in inf.top_states.rows() {
        pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
    }
    pooled.iter_mut().for_each(|p| *p /= n as f64);
    Ok(pooled)
}

fn training_labels(corpus: &[Utterance], config: &FinetuneConfig) -> Vec<usize> {
    let mut labels: Vec<usize> = corpus.iter().map(|u| u.label).collect();
    if config.permute_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        labels.shuffle(&mut rng);
    }
    labels
}

/// Trains the classifier head with cross-entropy on three classes. The
/// language model stays frozen; the acoustic path moves only when
/// `unfreeze_acoustic` is set.
pub fn finetune_downstream(corpus: &[Utterance], model: &mut GraftedModel, config: &FinetuneConfig) -> Result<FinetuneLog> {
    if corpus.is_empty() || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("finetune needs a corpus, batch_size > 0 and lr > 0".into()));
    }
    if model.classifier.is_none() {
        model.attach_classifier();
    }
    let labels = training_labels(corpus, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_steps = config.epochs * corpus.len().div_ceil(config.batch_size);
    let lr_at = |step: usize| config.lr * (1.0 - (step - 1) as f64 / total_steps as f64);
    let mut log = FinetuneLog::default();
    let mut head = model.classifier.take().expect("attached above");
    let mut head_opt = AdamW::new(&head.store, 0.9, 0.999, 1e-8, config.weight_decay);
    let mut result = finetune_head(corpus, &labels, model, &mut head, &mut head_opt, config, &mut rng, &lr_at, &mut log);
    if result.is_ok() && config.unfreeze_acoustic {
        result = finetune_joint(corpus, &labels, model, &mut head, config, &mut rng, &mut log);
    }
    model.classifier = Some(head);
    result.map(|()| log)
}

/// Centers and scales every column in place; returns the means and
/// standard deviations used.
fn standardize(rows: &mut [Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let (k, d) = (rows.len() as f64, rows[0].len());
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / k).sqrt().max(1e-8))
        .collect();
    for r in rows.iter_mut() {
        for (j, x) in r.iter_mut().enumerate() {
            *x = (*x - mu[j]) / sd[j];
        }
    }
    (mu, sd)
}

/// Rewrites `W z + b` with `z = (x - mu) / sd` as a map on raw `x`.
fn fold_standardization(head: &mut ClassifierHead, mu: &[f64], sd: &[f64]) {
    let (wid, bid) = (head.linear.weight, head.linear.bias);
    let classes = head.store.get(wid).shape()[1];
    let mut shift = vec![0.0; classes];
    let w = head.store.get_mut(wid).data_mut();
    for (j, (m, s)) in mu.iter().zip(sd).enumerate() {
        for c in 0..classes {
            w[j * classes + c] /= s;
            shift[c] += w[j * classes + c] * m;
        }
    }
    for (b, sh) in head.store.get_mut(bid).data_mut().iter_mut().zip(shift) {
        *b -= sh;
    }
}

#[allow(clippy::too_many_arguments)]
fn finetune_head(
    corpus: &[Utterance],
    labels: &[usize],
    model: &GraftedModel,
    head: &mut ClassifierHead,
    opt: &mut AdamW,
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
    lr_at: &dyn Fn(usize) -> f64,
    log: &mut FinetuneLog,
) -> Result<()> {
    // the acoustic path is fixed, so features are computed once
    let mut feats = Vec::new();
    let mut ys = Vec::new();
    for (u, &y) in corpus.iter().zip(labels) {
        match pooled_features(model, u) {
            Ok(f) => {
                feats.push(f);
                ys.push(y);
            }
            Err(Error::EmptyOutput) => continue,
            Err(e) => return Err(e),
        }
    }
    if feats.is_empty() {
        return Err(Error::EmptyOutput);
    }
    // train on standardized features, then fold the affine map into the head
    let (mu, sd) = standardize(&mut feats);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| feats[i].clone()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let mut g = Graph::new();
            let p = head.store.bind(&mut g, true);
            let x = g.constant(Tensor::from_rows(&rows)?);
            let z = head.forward_pooled(&mut g, &p, x)?;
            let ce = g.softmax_cross_entropy(z, &y)?;
            let value = g.scalar(ce);
            if !value.is_finite() {
                return Err(Error::DivergedLoss { step, value });
            }
            g.backward(ce)?;
            let grads = head.store.grads(&g, &p);
            let lr = lr_at(step);
            opt.step(&mut head.store, &grads, lr);
            log.rows.push((step, value, lr));
        }
    }
    fold_standardization(head, &mu, &sd);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune_joint(
    corpus: &[Utterance],
    labels: &[usize],
    model: &mut GraftedModel,
    head: &mut ClassifierHead,
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
    log: &mut FinetuneLog,
) -> Result<()> {
    let mut head_opt = AdamW::new(&head.store, 0.9, 0.999, 1e-8, config.weight_decay);
    let mut body_opt = AdamW::new(&model.trainable, 0.9, 0.999, 1e-8, config.weight_decay);
    let total = config.joint_epochs * corpus.len().div_ceil(config.batch_size);
    let first = log.rows.len();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for _ in 0..config.joint_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let mut g = Graph::new();
            let p = model.trainable.bind(&mut g, true);
            let lp = model.linguistic.bind(&mut g);
            let hp = head.store.bind(&mut g, true);
            let mut logits = Vec::new();
            let mut y = Vec::new();
            for &i in chunk {
                let u = &corpus[i];
                let x = g.constant(u.raw_frames.clone());
                let frames = model.acoustic.forward(&mut g, &p, x)?;
                let alpha = model.predictor.forward(&mut g, &p, frames)?;
                let (a_hat, _) = match integrate_and_fire_graph(&mut g, frames, alpha, &model.cif, None) {
                    Err(Error::EmptyOutput) => continue,
                    other => other?,
                };
                let (top, _) = model.graft(&mut g, &lp, a_hat)?;
                logits.push(head.forward(&mut g, &hp, top)?);
                y.push(labels[i]);
            }
            if logits.is_empty() {
                continue;
            }
            let z = g.concat_rows(&logits)?;
            let ce = g.softmax_cross_entropy(z, &y)?;
            let value = g.scalar(ce);
            if !value.is_finite() {
                return Err(Error::DivergedLoss { step, value });
            }
            g.backward(ce)?;
            let hg = head.store.grads(&g, &hp);
            let mut bg = model.trainable.grads(&g, &p);
            check_finite_grads(&bg, step)?;
            clip_global_norm(&mut bg, 5.0);
            let lr = config.joint_lr * (1.0 - (step - 1) as f64 / total as f64);
            head_opt.step(&mut head.store, &hg, lr);
            body_opt.step(&mut model.trainable, &bg, lr);
            log.rows.push((first + step, value, lr));
        }
    }
    Ok(())
}

/// Predicted class of one utterance, or `None` when nothing fires.
pub fn classify(model: &GraftedModel, u: &Utterance) -> Result<Option<usize>> {
    match inference_forward(&u.raw_frames, u.raw_hop_ms, model) {
        Ok(inf) => Ok(inf.class_probs.map(|p| argmax(&p))),
        Err(Error::EmptyOutput) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Teacher-forced alignment of one utterance on plain values.
pub fn teacher_forced_alignment(model: &GraftedModel, u: &Utterance) -> Result<FiredAlignment> {
    let frames = encode_acoustic(&u.raw_frames, u.raw_hop_ms, model)?;
    let w = predict_weights(&frames, &model.predictor, &model.trainable)?;
    let scaled = scale_weights(&w, u.num_tokens())?;
    integrate_and_fire(&frames, &scaled, &model.cif)
}

/// Boundary, tolerance, heatmap and token metrics from the teacher-forced
/// path, plus weighted classification scores when a classifier is attached.
pub fn evaluate_checkpoint(split: &[Utterance], model: &GraftedModel) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::EmptyErrors);
    }
    let depth = model.graft_depth();
    let hop = crate::models::acoustic::DOWNSAMPLE as f64;
    let mut errors = BoundaryErrors::default();
    let mut diag_sum = 0.0;
    let (mut top1, mut top5, mut tokens) = (0usize, 0usize, 0usize);
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for u in split {
        let fired = teacher_forced_alignment(model, u)?;
        let pred = extract_boundaries(&fired, u.raw_hop_ms * hop);
        let (e, _, _) = boundary_errors(&pred, &u.gold_boundaries)?;
        errors.extend(&e);
        let li = linguistic_targets(&u.token_ids, depth, &model.linguistic)?;
        diag_sum += diagonality_score(&similarity_heatmap(&fired.aligned, &li.states)?)?;
        let (_, logits) = graft_forward(&fired.aligned, model)?;
        for (row, &gold) in logits.rows().zip(&u.token_ids) {
            tokens += 1;
            top1 += usize::from(argmax(row) == gold);
            top5 += usize::from(top5_candidates(row).contains(&gold));
        }
        if model.classifier.is_some() {
            preds.push(classify(model, u)?);
            golds.push(u.label);
        }
    }
    let tol = tolerance_accuracy(&errors, &CUTOFFS_MS)?;
    let (recall, f1) = if model.classifier.is_some() {
        let s = classification_scores(&preds, &golds, NUM_CLASSES)?;
        (Some(s.recall_weighted), Some(s.f1_weighted))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        mae_ms: errors.mae(),
        median_ms: errors.median(),
        acc_50: tol.accuracy[0],
        acc_100: tol.accuracy[1],
        acc_500: tol.accuracy[2],
        acc_1000: tol.accuracy[3],
        diagonality: diag_sum / split.len() as f64,
        recall_weighted: recall,
        f1_weighted: f1,
        top1: top1 as f64 / tokens as f64,
        top5: top5 as f64 / tokens as f64,
        utterances: split.len(),
        tokens,
    })
}

/// Optional masked-prediction pretraining of the toy language model on
/// random token sequences. Masked positions enter as position-only inputs
/// and must be predicted through the tied head. The model is frozen again
/// afterwards.
pub fn pretrain_linguistic(lm: &mut LinguisticModel, steps: usize, seed: u64, mut progress: impl Write) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    lm.unfreeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut opt = AdamW::new(&lm.store, 0.9, 0.999, 1e-8, 0.0);
    let (vocab, d, len) = (lm.vocab(), lm.dim(), 10);
    for step in 1..=steps {
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let mut masked: Vec<usize> = (0..len).filter(|_| rng.random_bool(0.15)).collect();
        if masked.is_empty() {
            masked.push(rng.random_range(0..len));
        }
        let mut keep = vec![1.0; len * d];
        for &m in &masked {
            keep[m * d..(m + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let p = lm.bind(&mut g);
        let e = g.gather_rows(p[lm.embedding], &ids)?;
        let keep = g.constant(Tensor::matrix(len, d, keep)?);
        let e = g.mul(e, keep)?;
        let pos = g.constant(crate::models::sinusoidal_positions(len, d, lm.position_scale));
        let h = g.add(e, pos)?;
        let h = lm.run_layers(&mut g, &p, h, 0, lm.depth())?;
        let logits = lm.head(&mut g, &p, h)?;
        let picked = g.gather_rows(logits, &masked)?;
        let gold: Vec<usize> = masked.iter().map(|&m| ids[m]).collect();
        let ce = g.softmax_cross_entropy(picked, &gold)?;
        g.backward(ce)?;
        let mut grads = lm.store.grads(&g, &p);
        clip_global_norm(&mut grads, 5.0);
        opt.step(&mut lm.store, &grads, 1e-3);
        if step % 100 == 0 {
            let _ = writeln!(progress, "pretrain step {step}: masked ce {:.4}", g.scalar(ce));
        }
    }
    lm.freeze();
    Ok(())
}
