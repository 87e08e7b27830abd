use serde::{Deserialize, Serialize};

use super::DecodeError;

pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 24;

/// How incoming text is cut into chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ChunkPolicy {
    /// Cut after every delimiter token, or when the chunk reaches `max_tokens`.
    Sentence { delimiter: u32, max_tokens: usize },
    /// Cut every `max_tokens` tokens.
    FixedCap { max_tokens: usize },
    /// The whole text is one chunk.
    Whole,
}

impl ChunkPolicy {
    pub fn sentence(delimiter: u32) -> Self {
        ChunkPolicy::Sentence { delimiter, max_tokens: DEFAULT_MAX_CHUNK_TOKENS }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ChunkPolicy::Sentence { .. } => "sentence",
            ChunkPolicy::FixedCap { .. } => "fixed_cap",
            ChunkPolicy::Whole => "whole",
        }
    }

    pub fn max_tokens(&self) -> Option<usize> {
        match self {
            ChunkPolicy::Sentence { max_tokens, .. } | ChunkPolicy::FixedCap { max_tokens } => Some(*max_tokens),
            ChunkPolicy::Whole => None,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_tokens() == Some(0) {
            return Err(DecodeError::Config("max_chunk_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Incremental splitter shared by offline planning and streaming.
#[derive(Debug, Clone)]
pub struct ChunkSplitter {
    policy: ChunkPolicy,
    buffer: Vec<u32>,
}

impl ChunkSplitter {
    pub fn new(policy: ChunkPolicy) -> Self {
        Self { policy, buffer: Vec::new() }
    }

    /// Adds a token; returns a chunk once its boundary is known.
    pub fn push(&mut self, token: u32) -> Option<Vec<u32>> {
        self.buffer.push(token);
        let cut = match self.policy {
            ChunkPolicy::Sentence { delimiter, max_tokens } => token == delimiter || self.buffer.len() >= max_tokens,
            ChunkPolicy::FixedCap { max_tokens } => self.buffer.len() >= max_tokens,
            ChunkPolicy::Whole => false,
        };
        cut.then(|| std::mem::take(&mut self.buffer))
    }

    /// Flushes whatever is left at end of text.
    pub fn finish(&mut self) -> Option<Vec<u32>> {
        (!self.buffer.is_empty()).then(|| std::mem::take(&mut self.buffer))
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }
}

/// Chunks of a text, as half-open token ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub spans: Vec<(usize, usize)>,
    pub policy: ChunkPolicy,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn chunks<'t>(&'t self, text: &'t [u32]) -> impl Iterator<Item = &'t [u32]> + 't {
        self.spans.iter().map(move |&(a, b)| &text[a..b])
    }
}

pub fn plan_chunks(text: &[u32], policy: ChunkPolicy) -> Result<ChunkPlan, DecodeError> {
    if text.is_empty() {
        return Err(DecodeError::EmptyText);
    }
    policy.validate()?;
    let mut splitter = ChunkSplitter::new(policy);
    let mut spans = Vec::new();
    let mut start = 0;
    for &t in text {
        if let Some(chunk) = splitter.push(t) {
            spans.push((start, start + chunk.len()));
            start += chunk.len();
        }
    }
    if let Some(chunk) = splitter.finish() {
        spans.push((start, start + chunk.len()));
    }
    Ok(ChunkPlan { spans, policy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(plan: &ChunkPlan) -> Vec<usize> {
        plan.spans.iter().map(|(a, b)| b - a).collect()
    }

    #[test]
    fn short_text_is_one_chunk() {
        let text: Vec<u32> = (0..10).collect();
        assert_eq!(sizes(&plan_chunks(&text, ChunkPolicy::sentence(99)).unwrap()), vec![10]);
    }

    #[test]
    fn hard_cap_splits_greedily() {
        let text = vec![1; 50];
        assert_eq!(sizes(&plan_chunks(&text, ChunkPolicy::sentence(99)).unwrap()), vec![24, 24, 2]);
        assert_eq!(sizes(&plan_chunks(&text, ChunkPolicy::FixedCap { max_tokens: 24 }).unwrap()), vec![24, 24, 2]);
    }

    #[test]
    fn delimiter_takes_precedence() {
        let mut text = vec![1; 30];
        text[19] = 9;
        assert_eq!(sizes(&plan_chunks(&text, ChunkPolicy::sentence(9)).unwrap()), vec![20, 10]);
    }

    #[test]
    fn whole_policy_never_cuts() {
        let text = vec![9; 100];
        assert_eq!(sizes(&plan_chunks(&text, ChunkPolicy::Whole).unwrap()), vec![100]);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(plan_chunks(&[], ChunkPolicy::Whole), Err(DecodeError::EmptyText)));
        assert!(plan_chunks(&[1], ChunkPolicy::FixedCap { max_tokens: 0 }).is_err());
    }
}
