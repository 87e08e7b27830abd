use crate::vocab::{ExtendedVocab, SpeechSlot, StepTokens};

use super::engine::StepModel;
use super::layout::speech_groups;
use super::DecodeError;

/// Replays fixed per-chunk code sequences through the decoding schedule.
///
/// Chunk boundaries are detected from position 0. The logits put all weight
/// on the slot the schedule expects, so greedy decoding reproduces the script.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    vocab: ExtendedVocab,
    delay: usize,
    chunks: Vec<Vec<Vec<SpeechSlot>>>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptCursor {
    chunk: Option<usize>,
}

impl ScriptedModel {
    pub fn new(vocab: ExtendedVocab, delay: usize, chunk_codes: &[Vec<u32>]) -> Self {
        let chunks = chunk_codes.iter().map(|c| speech_groups(c, vocab.k())).collect();
        Self { vocab, delay, chunks }
    }
}

impl StepModel for ScriptedModel {
    type Cache = ScriptCursor;

    fn vocab(&self) -> ExtendedVocab {
        self.vocab
    }

    fn start(&self) -> ScriptCursor {
        ScriptCursor::default()
    }

    fn step(&self, cache: &mut ScriptCursor, input: &StepTokens, position: usize) -> Result<Vec<Vec<f64>>, DecodeError> {
        self.vocab.step_ids(input)?;
        if position == 0 {
            cache.chunk = Some(cache.chunk.map_or(0, |c| c + 1));
        }
        let chunk = cache.chunk.ok_or_else(|| DecodeError::Config("script must start at position 0".into()))?;
        let k = self.vocab.k();
        let group = position
            .checked_sub(self.delay)
            .and_then(|g| self.chunks.get(chunk).and_then(|groups| groups.get(g)))
            .cloned()
            .unwrap_or_else(|| vec![SpeechSlot::Pad; k]);
        group
            .iter()
            .map(|slot| {
                let mut row = vec![0.0; self.vocab.lane_classes()];
                row[self.vocab.lane_class(*slot)?] = 1.0;
                Ok(row)
            })
            .collect()
    }
}
