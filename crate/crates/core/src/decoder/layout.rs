//! Step layout of a chunk, shared by teacher forcing and decoding.
//!
//! For a chunk of `L` text tokens with delay `d`, local step `s` consumes
//! text token `s` (or `TEXT_PAD` once the chunk text runs out) and the speech
//! group emitted at step `s - 1` (all `SPEECH_PAD` at `s = 0`). Steps
//! `0..d` emit only padding. From step `d` on, the chunk's codes are emitted
//! `k` per step, the last code group padded with `SPEECH_PAD`, followed by a
//! group whose lane 0 is `SPEECH_EOS`.

use crate::speechlm::LaneTargets;
use crate::vocab::{ExtendedVocab, SpeechSlot, StepTokens, TextSlot};

use super::{plan_chunks, ChunkPolicy, DecodeError};

/// Steps needed for a chunk of `len` text tokens that emits `speech_slots`
/// speech slots up to and including its end marker.
pub fn schedule_steps(len: usize, speech_slots: usize, delay: usize, k: usize) -> usize {
    len.max(delay + speech_slots.div_ceil(k))
}

/// Emitted groups for `codes`: code groups of `k` then the end-marker group.
pub fn speech_groups(codes: &[u32], k: usize) -> Vec<Vec<SpeechSlot>> {
    let mut groups: Vec<Vec<SpeechSlot>> = codes
        .chunks(k)
        .map(|c| {
            let mut g: Vec<SpeechSlot> = c.iter().map(|&x| SpeechSlot::Code(x)).collect();
            g.resize(k, SpeechSlot::Pad);
            g
        })
        .collect();
    groups.push(end_group(k));
    groups
}

pub fn end_group(k: usize) -> Vec<SpeechSlot> {
    let mut g = vec![SpeechSlot::Pad; k];
    g[0] = SpeechSlot::Eos;
    g
}

/// Speech slots a chunk emits up to and including lane-0 `SPEECH_EOS`, given
/// its number of emitted groups.
pub fn emitted_slots(groups: usize, k: usize) -> usize {
    if groups == 0 {
        0
    } else {
        k * (groups - 1) + 1
    }
}

pub fn text_slot(chunk: &[u32], s: usize) -> TextSlot {
    chunk.get(s).map_or(TextSlot::Pad, |&t| TextSlot::Token(t))
}

/// Teacher-forced inputs and targets for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedSequence {
    pub steps: Vec<StepTokens>,
    pub positions: Vec<usize>,
    pub targets: Vec<LaneTargets>,
    /// Step count of each chunk, in order.
    pub chunk_steps: Vec<usize>,
}

impl ForcedSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().map(|t| t.iter().filter(|x| x.is_some()).count()).sum()
    }
}

/// Appends one chunk's teacher-forced layout to `out`.
pub fn push_chunk(
    out: &mut ForcedSequence,
    chunk: &[u32],
    codes: &[u32],
    vocab: &ExtendedVocab,
    delay: usize,
) -> Result<(), DecodeError> {
    let k = vocab.k();
    let groups = speech_groups(codes, k);
    let steps = schedule_steps(chunk.len(), emitted_slots(groups.len(), k), delay, k);
    let pad = vec![SpeechSlot::Pad; k];
    let emitted = |s: usize| -> Option<&Vec<SpeechSlot>> { s.checked_sub(delay).and_then(|g| groups.get(g)) };
    for s in 0..steps {
        let input = match s.checked_sub(1).and_then(emitted) {
            Some(g) => g.clone(),
            None => pad.clone(),
        };
        out.steps.push(StepTokens::new(text_slot(chunk, s), input));
        out.positions.push(s);
        let target = match emitted(s) {
            Some(g) if g[0] == SpeechSlot::Eos => {
                let mut t = vec![None; k];
                t[0] = Some(vocab.lane_class(SpeechSlot::Eos)?);
                t
            }
            Some(g) => g.iter().map(|slot| vocab.lane_class(*slot).map(Some)).collect::<Result<_, _>>()?,
            None => vec![None; k],
        };
        out.targets.push(target);
    }
    out.chunk_steps.push(steps);
    Ok(())
}

/// Layout of a whole text with its gold codes (`rate_ratio` codes per token,
/// no end marker), chunked by `policy`.
pub fn teacher_forced(
    text: &[u32],
    codes: &[u32],
    rate_ratio: usize,
    vocab: &ExtendedVocab,
    policy: ChunkPolicy,
    delay: usize,
) -> Result<ForcedSequence, DecodeError> {
    if codes.len() != text.len() * rate_ratio {
        return Err(DecodeError::Config(format!(
            "{} codes for {} text tokens at rate {rate_ratio}",
            codes.len(),
            text.len()
        )));
    }
    let plan = plan_chunks(text, policy)?;
    let mut out = ForcedSequence { steps: Vec::new(), positions: Vec::new(), targets: Vec::new(), chunk_steps: Vec::new() };
    for &(a, b) in &plan.spans {
        push_chunk(&mut out, &text[a..b], &codes[a * rate_ratio..b * rate_ratio], vocab, delay)?;
    }
    Ok(out)
}
