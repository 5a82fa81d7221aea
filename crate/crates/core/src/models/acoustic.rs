use rand::Rng;

use crate::cif::FrameSequence;
use crate::diffcore::nn::{Bound, Conv1d, FeedForwardBlock, ParamStore};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Minimum raw frame count accepted by the encoder.
pub const MIN_RAW_FRAMES: usize = 4;
/// Total time downsampling of the two stride-2 convolutions.
pub const DOWNSAMPLE: usize = 4;

/// Two stride-2 convolutions followed by position-wise feed-forward blocks.
#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub blocks: Vec<FeedForwardBlock>,
    pub d_in: usize,
    pub d_out: usize,
}

impl AcousticEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d_in: usize,
        d_out: usize,
        hidden: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        AcousticEncoder {
            conv1: Conv1d::new(store, "encoder.conv1", d_in, hidden, 2, rng),
            conv2: Conv1d::new(store, "encoder.conv2", hidden, d_out, 2, rng),
            blocks: (0..blocks)
                .map(|b| FeedForwardBlock::new(store, &format!("encoder.block{b}"), d_out, hidden, rng))
                .collect(),
            d_in,
            d_out,
        }
    }

    /// Output frame count for `m_raw` input frames.
    pub fn output_len(m_raw: usize) -> usize {
        m_raw.div_ceil(2).div_ceil(2)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
        let shape = g.shape(raw).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::shape(
                "encode_acoustic",
                format!("expected M_raw x {}, got {shape:?}", self.d_in),
            ));
        }
        if shape[0] < MIN_RAW_FRAMES {
            return Err(Error::TooShortInput {
                frames: shape[0],
                min: MIN_RAW_FRAMES,
            });
        }
        let h = self.conv1.forward(g, p, raw)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let mut h = g.gelu(h)?;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Runs the encoder on plain values.
    pub fn encode(&self, store: &ParamStore, raw: &Tensor, raw_hop_ms: f64, id: &str) -> Result<FrameSequence> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(raw.clone());
        let h = self.forward(&mut g, &p, x)?;
        FrameSequence::new(g.value(h).clone(), raw_hop_ms * DOWNSAMPLE as f64, id)
    }
}
