//! Chunked parallel decoding.
//!
//! Text is cut into chunks; each chunk runs a delay-padded schedule in which
//! the first `d` steps read text only and every later step emits `k` speech
//! codes at once. All chunks share one key/value cache, so every step sees
//! the full text and speech history.

mod chunking;
mod engine;
pub mod events;
pub mod layout;
pub mod scripted;
mod stream;

use thiserror::Error;

use crate::speechlm::SpeechLmError;
use crate::vocab::VocabError;

pub use chunking::{plan_chunks, ChunkPlan, ChunkPolicy, ChunkSplitter, DEFAULT_MAX_CHUNK_TOKENS};
pub use engine::{
    generate, generate_logical, ChunkReport, DecodeMode, DecodeOptions, Decoder, GenerateOutput, LengthControl,
    StepModel, StepRecord,
};
pub use events::{audit_schedule, ChunkAudit, Clock, EventKind, LogicalClock, MonotonicClock, StreamEvent};
pub use layout::{schedule_steps, teacher_forced, ForcedSequence};
pub use stream::{dual_track_run, DualTrackLog};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("empty text")]
    EmptyText,
    #[error("invalid decode setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] SpeechLmError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("chunk {chunk} hit its step budget of {steps} without an end marker")]
    Truncated { chunk: usize, steps: usize },
    /// Truncation during a full run, with everything decoded up to that point.
    #[error("chunk {chunk} hit its step budget of {steps} without an end marker")]
    Partial { chunk: usize, steps: usize, output: Box<GenerateOutput> },
}

impl DecodeError {
    /// Partial output carried by a truncation, if any.
    pub fn partial_output(&self) -> Option<&GenerateOutput> {
        match self {
            DecodeError::Partial { output, .. } => Some(output),
            _ => None,
        }
    }
}
