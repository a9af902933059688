//! Two-tower encoders and the fusion matching head.
//!
//! Each tower is `normalize(W2·tanh(W1·x + b1) + b2)`. The head scores a
//! pair from `[f_I, f_T, f_I ⊙ f_T]` through one tanh hidden layer and a
//! sigmoid, giving the match probability used by the matching losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Graph, KernelError, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("{modality} input has dimension {found}, expected {expected}")]
    Dim {
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// Layer widths for both towers and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub raw_image: usize,
    pub raw_text: usize,
    pub hidden: usize,
    pub embed: usize,
    pub head_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Graph handles for one tower.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Graph handles for the head.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    // variance 1/fan_in
    let a = (3.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::raw(fan_in, fan_out, data)
}

impl EncoderParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            w1: uniform(rng, input, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: uniform(rng, hidden, embed),
            b2: Tensor::zeros(1, embed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Registers the weights as trainable leaves.
    pub fn register(&self, g: &mut Graph) -> EncoderNodes {
        EncoderNodes {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    /// Embeds one raw vector.
    pub fn encode(&self, raw: &[f64], modality: Modality) -> Result<Encoded, EncoderError> {
        let batch = self.encode_batch(&Tensor::row(raw.to_vec())?, modality)?;
        Ok(Encoded {
            embedding: batch.embeddings.into_data(),
            degenerate: !batch.zero_rows.is_empty(),
        })
    }

    /// Embeds every row of `raw`.
    pub fn encode_batch(&self, raw: &Tensor, modality: Modality) -> Result<EncodedBatch, EncoderError> {
        if raw.cols() != self.input_dim() {
            return Err(EncoderError::Dim {
                modality,
                expected: self.input_dim(),
                found: raw.cols(),
            });
        }
        let mut g = Graph::new();
        let nodes = self.register(&mut g);
        let x = g.constant(raw.clone());
        let y = encode_nodes(&mut g, &nodes, x)?;
        let embeddings = g.value(y).clone();
        let zero_rows = (0..embeddings.rows())
            .filter(|&i| embeddings.row_slice(i).iter().all(|&v| v == 0.0))
            .collect();
        Ok(EncodedBatch { embeddings, zero_rows })
    }
}

impl FusionHeadParams {
    fn init(rng: &mut ChaCha8Rng, embed: usize, hidden: usize) -> Self {
        Self {
            w1: uniform(rng, 3 * embed, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: uniform(rng, hidden, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    /// All-zero head; its output is exactly 0.5 for any input.
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(3 * embed, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.rows() / 3
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn register(&self, g: &mut Graph) -> HeadNodes {
        HeadNodes {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub embedding: Vec<f64>,
    /// Set when the pre-normalization output was the zero vector.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub embeddings: Tensor,
    pub zero_rows: Vec<usize>,
}

/// `l2_normalize(affine2(tanh(affine1(raw))))` on graph node `raw`.
pub fn encode_nodes(g: &mut Graph, p: &EncoderNodes, raw: NodeId) -> Result<NodeId, KernelError> {
    let h = g.affine(raw, p.w1, p.b1)?;
    let h = g.tanh(h)?;
    let y = g.affine(h, p.w2, p.b2)?;
    g.l2_normalize(y)
}

/// Match probability for each row pair `(f_i[r], f_t[r])`, as an `m×1`
/// column.
pub fn match_probability_nodes(
    g: &mut Graph,
    head: &HeadNodes,
    f_i: NodeId,
    f_t: NodeId,
) -> Result<NodeId, KernelError> {
    let prod = g.mul(f_i, f_t)?;
    let x = g.concat_cols(&[f_i, f_t, prod])?;
    let h = g.affine(x, head.w1, head.b1)?;
    let h = g.tanh(h)?;
    let logit = g.affine(h, head.w2, head.b2)?;
    g.sigmoid(logit)
}

/// Match probability of a single image/text embedding pair. Argument order
/// matters: the head is not symmetric in its inputs.
pub fn match_probability(head: &FusionHeadParams, f_i: &[f64], f_t: &[f64]) -> Result<f64, EncoderError> {
    let d = head.embed_dim();
    for (modality, v) in [(Modality::Image, f_i), (Modality::Text, f_t)] {
        if v.len() != d {
            return Err(EncoderError::Dim {
                modality,
                expected: d,
                found: v.len(),
            });
        }
    }
    let mut g = Graph::new();
    let nodes = head.register(&mut g);
    let a = g.constant(Tensor::row(f_i.to_vec())?);
    let b = g.constant(Tensor::row(f_t.to_vec())?);
    let p = match_probability_nodes(&mut g, &nodes, a, b)?;
    Ok(g.value(p).item())
}

/// Weights uniform with variance `1/fan_in`, biases zero.
pub fn init_params(seed: u64, dims: &Dims) -> (EncoderParams, EncoderParams, FusionHeadParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = EncoderParams::init(&mut rng, dims.raw_image, dims.hidden, dims.embed);
    let text = EncoderParams::init(&mut rng, dims.raw_text, dims.hidden, dims.embed);
    let head = FusionHeadParams::init(&mut rng, dims.embed, dims.head_hidden);
    (image, text, head)
}
