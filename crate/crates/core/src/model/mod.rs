//! Desk-scale decoder-only transformer with per-tag (decoupled) routing.

pub mod init;
pub mod layers;
pub mod linalg;
mod network;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{
    decoupled_attention, decoupled_ffn, DecoupledLayerWeights, EncoderWeights, HiddenSegment,
    TagWeights,
};
pub use linalg::Matrix;
pub use network::{GradientMap, Target};

use crate::checkpoint::{AdapterConfig, Checkpoint};
use crate::params::{self, ParamError, ParameterMap, TEXT_TAG};
use crate::tensor::TensorError;

/// End-of-sequence token id of the toy vocabulary.
pub const EOS_TOKEN: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown segment tag {0:?}")]
    UnknownTag(String),
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("feature dimension mismatch for {tag:?}: expected {expected}, got {got}")]
    FeatureDim {
        tag: String,
        expected: usize,
        got: usize,
    },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("input has no text positions")]
    NoTextPositions,
    #[error("empty target set")]
    EmptyTargets,
    #[error("target position {0} beyond the text positions")]
    TargetOutOfRange(usize),
    #[error("parameter {0:?} is not in the model")]
    UnknownParameter(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Hidden width of every modality encoder.
    pub encoder_dim: usize,
    pub n_modality_tokens: usize,
    pub modality_feature_dims: BTreeMap<String, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            vocab_size: 64,
            encoder_dim: 32,
            n_modality_tokens: 4,
            modality_feature_dims: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.encoder_dim,
            self.n_modality_tokens,
        ];
        if dims.contains(&0) || self.modality_feature_dims.values().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        layers::check_heads(self.d_model, self.n_heads)
    }

    /// Architecture descriptor used as the prefix of a base id, e.g. `toyllm-d32-h2-l2-f64-v64`.
    pub fn arch_id(&self) -> String {
        format!(
            "toyllm-d{}-h{}-l{}-f{}-v{}",
            self.d_model, self.n_heads, self.n_layers, self.d_ff, self.vocab_size
        )
    }
}

/// Reads the head count from a base id produced by [`ModelConfig::arch_id`].
pub fn heads_from_base_id(base_id: &str) -> Option<usize> {
    let arch = base_id.split('@').next()?;
    arch.split('-')
        .find_map(|part| part.strip_prefix('h').and_then(|n| n.parse().ok()))
}

/// One contiguous run of the input: text tokens or a modality feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Text { tokens: Vec<u32> },
    Modality { tag: String, features: Vec<f32> },
}

impl Segment {
    pub fn text(tokens: impl Into<Vec<u32>>) -> Self {
        Segment::Text {
            tokens: tokens.into(),
        }
    }

    pub fn modality(tag: impl Into<String>, features: impl Into<Vec<f32>>) -> Self {
        Segment::Modality {
            tag: tag.into(),
            features: features.into(),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            Segment::Text { .. } => TEXT_TAG,
            Segment::Modality { tag, .. } => tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentedSequence {
    pub segments: Vec<Segment>,
}

impl SegmentedSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn modality_tags(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Modality { tag, .. } => Some(tag.as_str()),
                Segment::Text { .. } => None,
            })
            .collect()
    }

    pub fn text_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text { tokens } => tokens.len(),
                Segment::Modality { .. } => 0,
            })
            .sum()
    }

    /// Appends a token to the trailing text segment, opening one if needed.
    pub fn push_text_token(&mut self, token: u32) {
        match self.segments.last_mut() {
            Some(Segment::Text { tokens }) => tokens.push(token),
            _ => self.segments.push(Segment::text(vec![token])),
        }
    }

    /// Copy keeping only text and the listed modality segments.
    pub fn restricted_to<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: BTreeSet<&str> = keep.into_iter().collect();
        Self {
            segments: self
                .segments
                .iter()
                .filter(|s| matches!(s, Segment::Text { .. }) || keep.contains(s.tag()))
                .cloned()
                .collect(),
        }
    }
}

/// A checkpoint paired with the architecture recovered from its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMLLM {
    pub config: ModelConfig,
    pub checkpoint: Checkpoint,
}

impl ToyMLLM {
    /// Infers the architecture from parameter shapes; the head count comes from the base id.
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self, ModelError> {
        let p = &checkpoint.params;
        let embed = p.require("llm.embed")?;
        let (vocab_size, d_model) = embed
            .dims2()
            .ok_or_else(|| ModelError::Config("llm.embed must be 2-D".into()))?;
        let n_heads = heads_from_base_id(&checkpoint.base_id).ok_or_else(|| {
            ModelError::Config(format!(
                "base id {:?} does not encode a head count",
                checkpoint.base_id
            ))
        })?;
        let n_layers = (0..)
            .take_while(|i| p.contains(&format!("llm.blocks.{i}.ln1.gain")))
            .count();
        let w1 = if checkpoint.decoupled {
            format!("{}.text", params::block_weight(0, "w1"))
        } else {
            params::block_weight(0, "w1")
        };
        let d_ff = if n_layers == 0 {
            ModelConfig::default().d_ff
        } else {
            p.require(&w1)?.shape()[0]
        };
        let mut feature_dims = BTreeMap::new();
        let mut encoder_dim = ModelConfig::default().encoder_dim;
        let mut n_tokens = ModelConfig::default().n_modality_tokens;
        for m in &checkpoint.modalities {
            let enc = p.require(&format!("enc.{m}.weight"))?;
            let proj = p.require(&format!("proj.{m}.weight"))?;
            feature_dims.insert(m.clone(), enc.shape()[1]);
            encoder_dim = enc.shape()[0];
            n_tokens = proj.shape()[0] / d_model;
        }
        let config = ModelConfig {
            d_model,
            n_heads,
            n_layers,
            d_ff,
            vocab_size,
            encoder_dim,
            n_modality_tokens: n_tokens,
            modality_feature_dims: feature_dims,
        };
        config.validate()?;
        Ok(Self { config, checkpoint })
    }

    pub fn params(&self) -> &ParameterMap {
        &self.checkpoint.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterMap {
        &mut self.checkpoint.params
    }

    pub fn decoupled(&self) -> bool {
        self.checkpoint.decoupled
    }

    pub fn modalities(&self) -> &BTreeSet<String> {
        &self.checkpoint.modalities
    }

    pub fn adapter(&self) -> Option<AdapterConfig> {
        self.checkpoint.adapter
    }

    /// Logits for every text position, in sequence order (`n_text × vocab`).
    pub fn forward(&self, input: &SegmentedSequence) -> Result<Matrix, ModelError> {
        let prepared = network::Prepared::new(self)?;
        prepared.logits(input)
    }

    /// Modality token embeddings for one modality input.
    pub fn encode_modality(&self, tag: &str, features: &[f32]) -> Result<Matrix, ModelError> {
        let prepared = network::Prepared::new(self)?;
        prepared.encode(tag, features)
    }

    /// Mean cross-entropy over the targets, evaluated in `f64`.
    pub fn loss(&self, input: &SegmentedSequence, targets: &[Target]) -> Result<f64, ModelError> {
        network::Prepared::new(self)?.loss(input, targets)
    }

    /// Loss and reverse-mode gradients restricted to `trainable`.
    pub fn grad(
        &self,
        input: &SegmentedSequence,
        targets: &[Target],
        trainable: &BTreeSet<String>,
    ) -> Result<(f64, GradientMap), ModelError> {
        network::check_trainable(self, trainable)?;
        let prepared = network::Prepared::new(self)?;
        let mut acc = prepared.zero_grads();
        let loss = prepared.accumulate(input, targets, &mut acc, 1.0)?;
        Ok((loss, prepared.named_grads(self, &acc, trainable)?))
    }

    /// Mean loss and mean gradients over a batch of examples.
    pub fn batch_grad(
        &self,
        batch: &[(&SegmentedSequence, &[Target])],
        trainable: &BTreeSet<String>,
    ) -> Result<(f64, GradientMap), ModelError> {
        network::check_trainable(self, trainable)?;
        let prepared = network::Prepared::new(self)?;
        let mut acc = prepared.zero_grads();
        let w = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for (input, targets) in batch {
            loss += w * prepared.accumulate(input, targets, &mut acc, w)?;
        }
        Ok((loss, prepared.named_grads(self, &acc, trainable)?))
    }

    /// Greedy decoding: appends argmax tokens (lowest id on ties) until EOS or the limit.
    pub fn greedy_decode(
        &self,
        input: &SegmentedSequence,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, ModelError> {
        self.runner()?.greedy_decode(input, max_new_tokens)
    }

    /// Inference handle that converts the weights once for repeated calls.
    pub fn runner(&self) -> Result<Runner, ModelError> {
        Ok(Runner {
            prepared: network::Prepared::new(self)?,
        })
    }

    /// Weights of one layer bound per tag, with adapters materialized.
    pub fn layer_weights(&self, layer: usize) -> Result<DecoupledLayerWeights, ModelError> {
        network::Prepared::new(self)?.layer_weights(layer, self.modalities())
    }
}

pub struct Runner {
    prepared: network::Prepared,
}

impl Runner {
    pub fn logits(&self, input: &SegmentedSequence) -> Result<Matrix, ModelError> {
        self.prepared.logits(input)
    }

    pub fn greedy_decode(
        &self,
        input: &SegmentedSequence,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut seq = input.clone();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let logits = self.prepared.logits(&seq)?;
            if logits.rows == 0 {
                return Err(ModelError::NoTextPositions);
            }
            let tok = argmax_lowest(logits.row(logits.rows - 1)) as u32;
            out.push(tok);
            if tok == EOS_TOKEN {
                break;
            }
            seq.push_text_token(tok);
        }
        Ok(out)
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
