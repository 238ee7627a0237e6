//! Embedding, interleaved block stack, final norm and tied output head.

mod checkpoint;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    AttentionBlock, AttentionConfig, BlockError, InitScale, KvCache, Mamba2Block, MambaState,
    SsdConfig, NORM_EPS,
};
use crate::numerics::{NumericsError, Rng, Tensor};
use crate::tokenizer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid interleave: {0}")]
    InvalidInterleave(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<crate::ssd::SsdError> for ModelError {
    fn from(e: crate::ssd::SsdError) -> Self {
        ModelError::Block(BlockError::Ssd(e))
    }
}

impl ModelError {
    /// True when a forward or backward pass overflowed somewhere below.
    pub fn is_non_finite(&self) -> bool {
        use crate::ssd::SsdError;
        matches!(
            self,
            ModelError::Numerics(NumericsError::NonFinite { .. })
                | ModelError::Block(BlockError::Numerics(NumericsError::NonFinite { .. }))
                | ModelError::Block(BlockError::Ssd(SsdError::Numerics(
                    NumericsError::NonFinite { .. }
                )))
        )
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Mamba,
    Attention,
}

/// Which layers are attention layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// One attention layer at `attention_slot` of every `period` layers.
    Hybrid {
        period: usize,
        attention_slot: usize,
    },
    AttentionOnly,
    MambaOnly,
    Explicit(Vec<LayerKind>),
}

impl Default for Interleave {
    fn default() -> Self {
        Interleave::Hybrid {
            period: 8,
            attention_slot: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub intermediate_size: usize,
    pub ssd: SsdConfig,
    pub attn: AttentionConfig,
    #[serde(default)]
    pub interleave: Interleave,
    pub vocab_size: usize,
    pub max_context: usize,
}

/// The canonical small configuration: 8 layers (7 Mamba2, 1 attention),
/// width 128.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 128,
        intermediate_size: 256,
        ssd: SsdConfig {
            n_heads: 4,
            head_dim: 64,
            state: 64,
            expansion: 2,
            conv_width: 4,
            groups: 1,
            chunk: 64,
        },
        attn: AttentionConfig { n_heads: 4 },
        interleave: Interleave::default(),
        vocab_size: tokenizer::BASE_VOCAB,
        max_context: 8192,
    }
}

impl ModelConfig {
    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        let n = self.n_layers;
        if n == 0 {
            return Err(ModelError::InvalidInterleave(
                "model needs at least one layer".into(),
            ));
        }
        match &self.interleave {
            Interleave::Hybrid {
                period,
                attention_slot,
            } => {
                if *period == 0 || n % period != 0 {
                    return Err(ModelError::InvalidInterleave(format!(
                        "{n} layers is not a multiple of period {period}"
                    )));
                }
                if *attention_slot == 0 || attention_slot >= period {
                    return Err(ModelError::InvalidInterleave(format!(
                        "attention slot {attention_slot} must lie in 1..{period} so the first layer is Mamba2"
                    )));
                }
                Ok((0..n)
                    .map(|i| {
                        if i % period == *attention_slot {
                            LayerKind::Attention
                        } else {
                            LayerKind::Mamba
                        }
                    })
                    .collect())
            }
            Interleave::AttentionOnly => Ok(vec![LayerKind::Attention; n]),
            Interleave::MambaOnly => Ok(vec![LayerKind::Mamba; n]),
            Interleave::Explicit(kinds) => {
                if kinds.len() != n {
                    return Err(ModelError::InvalidInterleave(format!(
                        "{} kinds listed for {n} layers",
                        kinds.len()
                    )));
                }
                Ok(kinds.clone())
            }
        }
    }

    pub fn is_attention(&self, layer: usize) -> Result<bool> {
        Ok(self.layer_kinds()?.get(layer) == Some(&LayerKind::Attention))
    }

    pub fn validate(&self) -> Result<()> {
        let kinds = self.layer_kinds()?;
        if self.d_model == 0 || self.vocab_size == 0 || self.max_context == 0 {
            return Err(ModelError::InvalidConfig(
                "d_model, vocab_size and max_context must be positive".into(),
            ));
        }
        if kinds.contains(&LayerKind::Mamba) {
            self.ssd.validate(self.d_model)?;
        }
        if kinds.contains(&LayerKind::Attention)
            && (self.attn.n_heads == 0 || self.d_model % self.attn.n_heads != 0)
        {
            return Err(ModelError::InvalidConfig(format!(
                "{} attention heads do not divide d_model {}",
                self.attn.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn mamba_block_params(&self) -> usize {
        let (d, s) = (self.d_model, &self.ssd);
        let e = s.inner(d);
        let ch = s.conv_channels(d);
        d + d * (2 * e + 2 * s.groups * s.state + s.n_heads)
            + ch * s.conv_width
            + ch
            + 2 * s.n_heads
            + e
            + e * d
    }

    pub fn attention_block_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 3 * d * self.intermediate_size
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> Result<usize> {
        let kinds = self.layer_kinds()?;
        let blocks: usize = kinds
            .iter()
            .map(|k| match k {
                LayerKind::Mamba => self.mamba_block_params(),
                LayerKind::Attention => self.attention_block_params(),
            })
            .sum();
        Ok(self.vocab_size * self.d_model + blocks + self.d_model)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Mamba(Mamba2Block),
    Attention(AttentionBlock),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Mamba(_) => LayerKind::Mamba,
            Layer::Attention(_) => LayerKind::Attention,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Mamba(b) => b.params(),
            Layer::Attention(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Mamba(b) => b.params_mut(),
            Layer::Attention(b) => b.params_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Mamba(MambaState),
    Attention(KvCache),
}

/// Per-layer recurrent state for token-by-token decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub layers: Vec<LayerState>,
    pub position: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
}

pub const EMBEDDING_STD: f64 = 0.02;

impl Model {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let init = InitScale::for_depth(config.n_layers);
        let d = config.d_model;
        let embedding = Tensor::param(
            [config.vocab_size, d],
            rng.normal_vec(config.vocab_size * d, EMBEDDING_STD),
        )?;
        let layers = config
            .layer_kinds()?
            .into_iter()
            .map(|kind| {
                Ok(match kind {
                    LayerKind::Mamba => Layer::Mamba(Mamba2Block::new(d, &config.ssd, init, rng)?),
                    LayerKind::Attention => Layer::Attention(AttentionBlock::new(
                        d,
                        config.intermediate_size,
                        &config.attn,
                        init,
                        rng,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Tensor::param([d], vec![1.0; d])?;
        Ok(Model {
            config: config.clone(),
            embedding,
            layers,
            final_norm,
        })
    }

    pub fn is_attention(&self, layer: usize) -> bool {
        matches!(self.layers.get(layer), Some(Layer::Attention(_)))
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding.weight".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .params()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding.weight".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .params_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm.weight".to_string(), &mut self.final_norm));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Appends `extra` randomly initialized embedding rows for new tokens.
    pub fn expand_vocab(&mut self, new_size: usize, rng: &mut Rng) -> Result<()> {
        let old = self.config.vocab_size;
        if new_size < old {
            return Err(ModelError::InvalidConfig(format!(
                "cannot shrink vocabulary from {old} to {new_size}"
            )));
        }
        let d = self.config.d_model;
        let mut data = self.embedding.to_vec();
        data.extend(rng.normal_vec((new_size - old) * d, EMBEDDING_STD));
        self.embedding = Tensor::param([new_size, d], data)?;
        self.config.vocab_size = new_size;
        Ok(())
    }

    fn check_ids(&self, ids: &[u32], already: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let len = already + ids.len();
        if len > self.config.max_context {
            return Err(ModelError::ContextOverflow {
                len,
                max: self.config.max_context,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final-norm hidden states `[L, d]` for a full sequence.
    pub fn hidden(&self, ids: &[u32]) -> Result<Tensor> {
        self.check_ids(ids, 0)?;
        let mut h = Tensor::embedding(&self.embedding, ids)?;
        for layer in &self.layers {
            h = match layer {
                Layer::Mamba(b) => b.forward(&h, None)?,
                Layer::Attention(b) => b.forward(&h, None)?,
            };
        }
        Ok(h.rms_norm(&self.final_norm, NORM_EPS)?)
    }

    /// Tied head on `hidden / sqrt(d)`, which keeps initial logits near zero.
    pub fn logits_from_hidden(&self, hidden: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        Ok(hidden
            .scale(scale)?
            .matmul(&self.embedding.transpose(0, 1)?)?)
    }

    /// Next-token logits `[L, vocab]`.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        self.logits_from_hidden(&self.hidden(ids)?)
    }

    pub fn decode_state(&self) -> DecodeState {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Mamba(b) => LayerState::Mamba(b.empty_state()),
                Layer::Attention(b) => LayerState::Attention(b.empty_cache()),
            })
            .collect();
        DecodeState {
            layers,
            position: 0,
        }
    }

    /// Consumes `ids` after the prefix already in `state`; returns their
    /// logits `[ids.len(), vocab]`.
    pub fn forward_stateful(&self, ids: &[u32], state: &mut DecodeState) -> Result<Tensor> {
        self.check_ids(ids, state.position)?;
        if state.layers.len() != self.layers.len() {
            return Err(BlockError::StateShapeMismatch(format!(
                "{} layer states for {} layers",
                state.layers.len(),
                self.layers.len()
            ))
            .into());
        }
        let mut h = Tensor::embedding(&self.embedding, ids)?;
        for (layer, st) in self.layers.iter().zip(state.layers.iter_mut()) {
            h = match (layer, st) {
                (Layer::Mamba(b), LayerState::Mamba(s)) => b.forward(&h, Some(s))?,
                (Layer::Attention(b), LayerState::Attention(c)) => b.forward(&h, Some(c))?,
                _ => {
                    return Err(BlockError::StateShapeMismatch(
                        "layer kind and state kind differ".into(),
                    )
                    .into())
                }
            };
        }
        state.position += ids.len();
        self.logits_from_hidden(&h.rms_norm(&self.final_norm, NORM_EPS)?)
    }

    /// Copy of the model whose parameters are fresh leaves with the same
    /// values (no accumulated gradients).
    pub fn detached(&self) -> Model {
        let mut m = self.clone();
        for (_, p) in m.named_parameters_mut() {
            *p = p.detach_param();
        }
        m
    }

    /// Copy of the model whose parameters do not require gradients, so
    /// forward passes record no graph.
    pub fn frozen(&self) -> Model {
        let mut m = self.clone();
        for (_, p) in m.named_parameters_mut() {
            *p = p.detach();
        }
        m
    }
}
