//! Toy acoustic encoder, frozen layered language model, and their
//! composition: aligned acoustic tokens enter the language model after
//! layer `i`, replacing its first `i` layers.

pub mod acoustic;
mod checkpoint;
mod linguistic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cif::{integrate_and_fire, predict_weights, AlignmentWeights, CifConfig, FiredAlignment, FrameSequence, WeightPredictor};
use crate::diffcore::nn::{Bound, Linear, ParamStore};
use crate::diffcore::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use acoustic::{AcousticEncoder, DOWNSAMPLE, MIN_RAW_FRAMES};
pub use checkpoint::{CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use linguistic::{sinusoidal_positions, LinguisticModel, LinguisticSpec, LmLayer};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Shared width of the acoustic tokens and the language model.
    pub d_model: usize,
    pub vocab: usize,
    pub lm_layers: usize,
    pub lm_hidden: usize,
    pub lm_attention: bool,
    pub anisotropy: f64,
    pub position_scale: f64,
    pub residual_scale: f64,
    pub encoder_hidden: usize,
    pub encoder_blocks: usize,
    pub graft_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d_model: 32,
            vocab: 32,
            lm_layers: 12,
            lm_hidden: 64,
            lm_attention: false,
            anisotropy: 2.0,
            position_scale: 0.03,
            residual_scale: 0.3,
            encoder_hidden: 128,
            encoder_blocks: 2,
            graft_depth: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.vocab == 0 || self.lm_hidden == 0 || self.encoder_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.graft_depth > self.lm_layers {
            return Err(Error::DepthOutOfRange {
                depth: self.graft_depth,
                max: self.lm_layers,
            });
        }
        if !(self.anisotropy >= 0.0 && self.position_scale >= 0.0 && self.residual_scale >= 0.0) {
            return Err(Error::Config("model scales must be non-negative".into()));
        }
        Ok(())
    }

    fn lm_spec(&self) -> LinguisticSpec {
        LinguisticSpec {
            vocab: self.vocab,
            dim: self.d_model,
            layers: self.lm_layers,
            hidden: self.lm_hidden,
            attention: self.lm_attention,
            anisotropy: self.anisotropy,
            position_scale: self.position_scale,
            residual_scale: self.residual_scale,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean-pool over tokens, then a linear map to three class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub store: ParamStore,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "classifier", d, NUM_CLASSES, &mut stream(seed, 3));
        ClassifierHead { store, linear }
    }

    /// `[1 x 3]` logits from `N x d` token states.
    pub fn forward(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<Var> {
        let pooled = g.mean_rows(states)?;
        self.linear.forward(g, p, pooled)
    }

    /// Logits from already pooled `K x d` features (one row per utterance).
    pub fn forward_pooled(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
        self.linear.forward(g, p, pooled)
    }

    pub fn probabilities(&self, states: &Tensor) -> Result<[f64; NUM_CLASSES]> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let s = g.constant(states.clone());
        let z = self.forward(&mut g, &p, s)?;
        let mut probs = [0.0; NUM_CLASSES];
        probs.copy_from_slice(g.data(z));
        softmax_in_place(&mut probs);
        Ok(probs)
    }
}

#[derive(Debug, Clone)]
pub struct GraftedModel {
    pub config: ModelConfig,
    pub cif: CifConfig,
    /// Encoder and weight predictor parameters.
    pub trainable: ParamStore,
    pub acoustic: AcousticEncoder,
    pub predictor: WeightPredictor,
    pub linguistic: LinguisticModel,
    pub classifier: Option<ClassifierHead>,
}

/// Frozen-model states at one depth, paired with the ids that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub states: Tensor,
    pub ids: Vec<usize>,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub frames: FrameSequence,
    pub weights: AlignmentWeights,
    pub fired: FiredAlignment,
    pub top_states: Tensor,
    pub logits: Tensor,
    pub token_ids: Vec<usize>,
    pub class_probs: Option<[f64; NUM_CLASSES]>,
}

impl GraftedModel {
    /// Builds every component from `config.seed`; the language model,
    /// acoustic path and classifier draw from separate random streams.
    pub fn new(config: ModelConfig, cif: CifConfig) -> Result<Self> {
        config.validate()?;
        let linguistic = LinguisticModel::new(&config.lm_spec(), &mut stream(config.seed, 1));
        let mut rng = stream(config.seed, 2);
        let mut trainable = ParamStore::new();
        let acoustic = AcousticEncoder::new(
            &mut trainable,
            config.d_in,
            config.d_model,
            config.encoder_hidden,
            config.encoder_blocks,
            &mut rng,
        );
        let predictor = WeightPredictor::new(&mut trainable, "predictor", config.d_model, &mut rng);
        Ok(GraftedModel {
            config,
            cif,
            trainable,
            acoustic,
            predictor,
            linguistic,
            classifier: None,
        })
    }

    pub fn graft_depth(&self) -> usize {
        self.config.graft_depth
    }

    pub fn attach_classifier(&mut self) {
        self.classifier = Some(ClassifierHead::new(self.config.d_model, self.config.seed));
    }

    /// Feeds aligned tokens through layers `i+1 ..= L` and the tied head.
    /// Returns `(top_states, logits)`.
    pub fn graft(&self, g: &mut Graph, lp: &Bound, a_hat: Var) -> Result<(Var, Var)> {
        let d = self.linguistic.dim();
        if g.value(a_hat).rank() != 2 || g.shape(a_hat)[1] != d {
            return Err(Error::DimensionMismatch(format!(
                "aligned tokens {:?} but the language model width is {d}",
                g.shape(a_hat)
            )));
        }
        let top = self
            .linguistic
            .run_layers(g, lp, a_hat, self.graft_depth(), self.linguistic.depth())?;
        let logits = self.linguistic.head(g, lp, top)?;
        Ok((top, logits))
    }
}

/// Encodes raw frames (`M_raw x d_in`) into acoustic frames at a 4x hop.
pub fn encode_acoustic(raw: &Tensor, raw_hop_ms: f64, model: &GraftedModel) -> Result<FrameSequence> {
    model.acoustic.encode(&model.trainable, raw, raw_hop_ms, "")
}

/// Frozen-model states after layer `depth` for `token_ids`.
pub fn linguistic_targets(token_ids: &[usize], depth: usize, lm: &LinguisticModel) -> Result<TokenSequence> {
    Ok(TokenSequence {
        states: lm.layer_output(token_ids, depth)?,
        ids: token_ids.to_vec(),
        depth,
    })
}

/// Runs aligned tokens through the upper frozen layers and the head.
pub fn graft_forward(a_hat: &Tensor, model: &GraftedModel) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let lp = model.linguistic.bind(&mut g);
    let a = g.constant(a_hat.clone());
    let (top, logits) = model.graft(&mut g, &lp, a)?;
    Ok((g.value(top).clone(), g.value(logits).clone()))
}

/// Full inference: encode, predict weights, fire with the tail policy,
/// graft, and read out token ids and (if present) class probabilities.
pub fn inference_forward(raw: &Tensor, raw_hop_ms: f64, model: &GraftedModel) -> Result<Inference> {
    let frames = encode_acoustic(raw, raw_hop_ms, model)?;
    let weights = predict_weights(&frames, &model.predictor, &model.trainable)?;
    let fired = integrate_and_fire(&frames, &weights, &model.cif)?;
    let (top_states, logits) = graft_forward(&fired.aligned, model)?;
    let token_ids = logits.rows().map(argmax).collect();
    let class_probs = match &model.classifier {
        Some(c) => Some(c.probabilities(&top_states)?),
        None => None,
    };
    Ok(Inference {
        frames,
        weights,
        fired,
        top_states,
        logits,
        token_ids,
        class_probs,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the five largest logits, descending, lower index first on ties.
pub fn top5_candidates(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(5);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GraftedModel {
        GraftedModel::new(ModelConfig::default(), CifConfig::default()).unwrap()
    }

    #[test]
    fn top5_examples() {
        assert_eq!(top5_candidates(&[0.0, 3.0, 2.0, 5.0, 1.0, 4.0]), vec![3, 5, 1, 2, 4]);
        assert_eq!(top5_candidates(&[1.0; 8]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn encoder_stride_arithmetic() {
        let m = small();
        let raw = Tensor::zeros(&[16, 16]);
        let f = encode_acoustic(&raw, 5.0, &m).unwrap();
        assert_eq!((f.len(), f.hop_ms), (4, 20.0));
        for m_raw in 4..40 {
            assert_eq!(AcousticEncoder::output_len(m_raw), m_raw.div_ceil(2).div_ceil(2));
            let f = encode_acoustic(&Tensor::zeros(&[m_raw, 16]), 5.0, &m).unwrap();
            assert_eq!(f.len(), AcousticEncoder::output_len(m_raw));
        }
        assert!(matches!(
            encode_acoustic(&Tensor::zeros(&[3, 16]), 5.0, &m),
            Err(Error::TooShortInput { frames: 3, min: 4 })
        ));
    }

    #[test]
    fn zero_params_give_zero_mean_frames() {
        let mut m = small();
        m.trainable.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x = 0.0));
        let f = encode_acoustic(&Tensor::zeros(&[12, 16]), 5.0, &m).unwrap();
        for row in f.features.rows() {
            assert!(row.iter().all(|x| x.is_finite()));
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn depth_zero_is_embedding_plus_positions() {
        let m = small();
        let ids = [3, 1, 4, 1, 5];
        let t = linguistic_targets(&ids, 0, &m.linguistic).unwrap();
        let emb = m.linguistic.store.get(m.linguistic.embedding);
        let pos = sinusoidal_positions(ids.len(), 32, m.config.position_scale);
        for (k, &id) in ids.iter().enumerate() {
            for j in 0..32 {
                assert_eq!(t.states.get2(k, j), emb.get2(id, j) + pos.get2(k, j));
            }
        }
        let deep = linguistic_targets(&ids, 12, &m.linguistic).unwrap();
        assert_ne!(deep.states, t.states);
        assert_eq!(linguistic_targets(&ids, 12, &m.linguistic).unwrap(), deep);
        assert!(matches!(
            linguistic_targets(&ids, 13, &m.linguistic),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(matches!(
            linguistic_targets(&[32], 1, &m.linguistic),
            Err(Error::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn grafting_targets_reproduces_top_layer() {
        for depth in [3, 6, 9, 12] {
            let m = GraftedModel::new(
                ModelConfig {
                    graft_depth: depth,
                    ..ModelConfig::default()
                },
                CifConfig::default(),
            )
            .unwrap();
            let ids = [7, 0, 31, 12, 5, 9];
            let li = linguistic_targets(&ids, depth, &m.linguistic).unwrap();
            let (top, logits) = graft_forward(&li.states, &m).unwrap();
            assert_eq!(top, m.linguistic.layer_output(&ids, 12).unwrap());
            assert_eq!(logits.shape(), &[6, 32]);
        }
    }

    #[test]
    fn graft_rejects_wrong_width() {
        let m = small();
        assert!(matches!(
            graft_forward(&Tensor::zeros(&[3, 8]), &m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn frozen_model_predicts_its_own_ids() {
        let m = small();
        let ids: Vec<usize> = (0..12).map(|k| (k * 7 + 3) % 32).collect();
        let li = linguistic_targets(&ids, 3, &m.linguistic).unwrap();
        let (_, logits) = graft_forward(&li.states, &m).unwrap();
        let pred: Vec<usize> = logits.rows().map(argmax).collect();
        assert_eq!(pred, ids);
    }
}
