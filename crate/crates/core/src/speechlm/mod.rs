//! The toy speech language model.
//!
//! Every step's input is the unweighted mean of the embeddings of its text
//! slot and its `k` speech slots, plus a learned position embedding. The
//! stack is: base blocks → adapter blocks → final norm → `k` independent lane
//! heads. Parameters carry one of two group tags so training stages can
//! freeze the base while updating the adapter.

mod model;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{NumError, Params};
use crate::vocab::{ExtendedVocab, VocabError};

pub use model::{DecodeCache, LaneTargets, LmOutput, SpeechLm, SpeechLmTape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeechLmError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("position {position} exceeds max_seq_len {max}")]
    Overlength { position: usize, max: usize },
    #[error("{steps} steps but {other} {what}")]
    Misaligned { steps: usize, other: usize, what: &'static str },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty input sequence")]
    Empty,
}

/// Whether `SPEECH_PAD` embeddings are trained or pinned at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadEmbedding {
    #[default]
    Learned,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechLmConfig {
    pub d_model: usize,
    pub n_layers_base: usize,
    pub n_layers_adapter: usize,
    pub n_heads: usize,
    /// Number of learned position rows. Positions restart at every chunk.
    pub max_seq_len: usize,
    pub vocab: ExtendedVocab,
    /// Lane heads reuse the lane's speech embedding rows as output weights.
    pub tie_heads: bool,
    /// Fixed per-head linear distance penalty inside attention.
    pub recency_bias: bool,
    pub pad_embedding: PadEmbedding,
}

impl SpeechLmConfig {
    /// d_model 128, 4 base blocks, 2 adapter blocks, 4 heads, 64 speech codes, k = 4.
    pub fn toy() -> Self {
        Self {
            d_model: 128,
            n_layers_base: 4,
            n_layers_adapter: 2,
            n_heads: 4,
            max_seq_len: 1536,
            vocab: ExtendedVocab::new(32, 64, 4).expect("static sizes"),
            tie_heads: false,
            recency_bias: true,
            pad_embedding: PadEmbedding::Learned,
        }
    }

    /// d_model 64, 2 base blocks, 1 adapter block; trains in minutes on one core.
    pub fn compact() -> Self {
        Self { d_model: 64, n_layers_base: 2, n_layers_adapter: 1, ..Self::toy() }
    }

    /// The toy model with a six-block adapter.
    pub fn deep_adapter() -> Self {
        Self { n_layers_adapter: 6, ..Self::toy() }
    }

    pub fn with_k(&self, k: usize) -> Result<Self, SpeechLmError> {
        let vocab = ExtendedVocab::new(self.vocab.n_text(), self.vocab.n_speech(), k)?;
        Ok(Self { vocab, ..self.clone() })
    }

    pub fn validate(&self) -> Result<(), SpeechLmError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(SpeechLmError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers_adapter == 0 {
            return Err(SpeechLmError::Config("n_layers_adapter must be at least 1".into()));
        }
        if self.max_seq_len == 0 {
            return Err(SpeechLmError::Config("max_seq_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Adapter,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Base => "base",
            ParamGroup::Adapter => "adapter",
        })
    }
}

/// Parameters that carry a group tag per matrix, aligned with
/// [`Params::collect`] order.
pub trait GroupedParams: Params {
    fn groups(&self) -> Vec<ParamGroup>;
}
