use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numcore::rng::Rng;
use crate::speechlm::{DecodeCache, SpeechLm};
use crate::vocab::{ExtendedVocab, SpeechSlot, StepTokens};

use super::events::{Clock, EventKind, LogicalClock, StreamEvent};
use super::layout::{end_group, text_slot};
use super::{plan_chunks, ChunkPolicy, DecodeError};

/// Anything that maps one input step to `k` lane distributions.
pub trait StepModel {
    type Cache;

    fn vocab(&self) -> ExtendedVocab;
    fn start(&self) -> Self::Cache;
    /// Lane logits (one row of `lane_classes` values per lane) for `input` at `position`.
    fn step(&self, cache: &mut Self::Cache, input: &StepTokens, position: usize) -> Result<Vec<Vec<f64>>, DecodeError>;
}

impl StepModel for SpeechLm {
    type Cache = DecodeCache;

    fn vocab(&self) -> ExtendedVocab {
        self.config().vocab
    }

    fn start(&self) -> DecodeCache {
        self.new_cache()
    }

    fn step(&self, cache: &mut DecodeCache, input: &StepTokens, position: usize) -> Result<Vec<Vec<f64>>, DecodeError> {
        Ok(SpeechLm::step(self, cache, input, position)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64, temperature: f64 },
}

/// How a chunk decides when to stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "length", rename_all = "snake_case")]
pub enum LengthControl {
    /// Stop at the model's lane-0 end marker.
    Free,
    /// Emit exactly `rate · len` codes, then stop; used for equal-length timing.
    Oracle { rate: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub delay: usize,
    pub policy: ChunkPolicy,
    pub mode: DecodeMode,
    pub length: LengthControl,
    /// Expected speech codes per text token, used for the step budget.
    pub rate_ratio: usize,
}

impl DecodeOptions {
    pub fn new(policy: ChunkPolicy) -> Self {
        Self { delay: 4, policy, mode: DecodeMode::Greedy, length: LengthControl::Free, rate_ratio: 8 }
    }

    /// Step cap for a chunk of `len` text tokens.
    pub fn budget(&self, len: usize, k: usize) -> usize {
        len.max(self.delay + (self.rate_ratio * len * 2).div_ceil(k))
    }
}

/// One executed decoding step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chunk: usize,
    pub local_step: usize,
    pub input: StepTokens,
    pub emitted: Vec<SpeechSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub tokens: Vec<u32>,
    pub codes: Vec<u32>,
    pub steps: usize,
    /// Speech slots emitted up to and including the end marker.
    pub speech_slots: usize,
    pub ended: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutput {
    /// All chunks' codes in order, without markers or padding.
    pub codes: Vec<u32>,
    pub chunks: Vec<ChunkReport>,
    pub history: Vec<StepRecord>,
    pub events: Vec<StreamEvent>,
    pub steps: usize,
    pub elapsed_ns: u64,
}

/// Decoding state across chunks: one cache holding the full history.
pub struct Decoder<'m, M: StepModel> {
    model: &'m M,
    vocab: ExtendedVocab,
    options: DecodeOptions,
    cache: M::Cache,
    rng: Option<Rng>,
    clock: Arc<dyn Clock>,
    started_ns: u64,
    step: usize,
    codes: Vec<u32>,
    chunks: Vec<ChunkReport>,
    history: Vec<StepRecord>,
    events: Vec<StreamEvent>,
}

impl<'m, M: StepModel> Decoder<'m, M> {
    pub fn new(model: &'m M, options: DecodeOptions, clock: Arc<dyn Clock>) -> Result<Self, DecodeError> {
        options.policy.validate()?;
        let rng = match options.mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sampled { seed, temperature } => {
                if !(temperature > 0.0) {
                    return Err(DecodeError::Config(format!("temperature {temperature} must be positive")));
                }
                Some(Rng::seed(seed))
            }
        };
        let started_ns = clock.now_ns();
        Ok(Self {
            model,
            vocab: model.vocab(),
            options,
            cache: model.start(),
            rng,
            clock,
            started_ns,
            step: 0,
            codes: Vec::new(),
            chunks: Vec::new(),
            history: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn options(&self) -> &DecodeOptions {
        &self.options
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub(crate) fn log(&mut self, kind: EventKind) {
        self.log_at(kind, self.clock.now_ns());
    }

    pub(crate) fn log_at(&mut self, kind: EventKind, t_ns: u64) {
        self.events.push(StreamEvent { step: self.step, kind, t_ns });
    }

    fn pick(&mut self, logits: &[f64], allow: impl Fn(usize) -> bool) -> usize {
        let candidates = (0..logits.len()).filter(|&c| allow(c));
        match (&mut self.rng, self.options.mode) {
            (Some(rng), DecodeMode::Sampled { temperature, .. }) => {
                let idx: Vec<usize> = candidates.collect();
                let max = idx.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = idx.iter().map(|&c| ((logits[c] - max) / temperature).exp()).collect();
                idx[rng.weighted(&weights)]
            }
            _ => candidates.fold(None, |best: Option<usize>, c| match best {
                Some(b) if logits[b] >= logits[c] => Some(b),
                _ => Some(c),
            })
            .expect("at least one allowed class"),
        }
    }

    /// Runs the delay-padded schedule for one chunk on top of the history.
    pub fn decode_chunk(&mut self, tokens: &[u32]) -> Result<&ChunkReport, DecodeError> {
        if tokens.is_empty() {
            return Err(DecodeError::EmptyText);
        }
        let k = self.vocab.k();
        let n_speech = self.vocab.n_speech();
        let chunk = self.chunks.len();
        let delay = self.options.delay;
        let budget = self.options.budget(tokens.len(), k);
        self.log(EventKind::ChunkStart { chunk, tokens: tokens.to_vec() });
        let mut prev = vec![SpeechSlot::Pad; k];
        let mut codes = Vec::new();
        let mut groups = 0usize;
        let mut ended = false;
        let mut s = 0;
        while s < tokens.len() || !ended {
            if s >= budget {
                let report = ChunkReport { tokens: tokens.to_vec(), codes, steps: s, speech_slots: groups * k, ended };
                self.codes.extend_from_slice(&report.codes);
                self.chunks.push(report);
                return Err(DecodeError::Truncated { chunk, steps: s });
            }
            let input = StepTokens::new(text_slot(tokens, s), std::mem::replace(&mut prev, vec![SpeechSlot::Pad; k]));
            let logits = self.model.step(&mut self.cache, &input, s)?;
            let emitted = if s < delay || ended {
                vec![SpeechSlot::Pad; k]
            } else {
                let group = self.choose_group(&logits, tokens.len(), codes.len());
                groups += 1;
                if group[0] == SpeechSlot::Eos {
                    ended = true;
                } else {
                    codes.extend(group.iter().filter_map(|slot| match slot {
                        SpeechSlot::Code(c) => Some(*c),
                        _ => None,
                    }));
                }
                group
            };
            debug_assert!(codes.iter().all(|&c| (c as usize) < n_speech));
            self.log(EventKind::Speech { chunk, local_step: s, slots: emitted.clone() });
            self.history.push(StepRecord { chunk, local_step: s, input, emitted: emitted.clone() });
            prev = emitted;
            self.step += 1;
            s += 1;
        }
        let speech_slots = if groups == 0 { 0 } else { k * (groups - 1) + 1 };
        self.log(EventKind::ChunkEnd { chunk, steps: s, codes: codes.len() });
        self.codes.extend_from_slice(&codes);
        self.chunks.push(ChunkReport { tokens: tokens.to_vec(), codes, steps: s, speech_slots, ended });
        Ok(self.chunks.last().expect("just pushed"))
    }

    fn choose_group(&mut self, logits: &[Vec<f64>], len: usize, emitted: usize) -> Vec<SpeechSlot> {
        let k = self.vocab.k();
        let n_speech = self.vocab.n_speech();
        let eos = n_speech + 1;
        match self.options.length {
            LengthControl::Free => {
                let lane0 = self.pick(&logits[0], |_| true);
                if lane0 == eos {
                    return end_group(k);
                }
                let mut group = vec![self.vocab.slot_from_class(lane0)];
                for lane_logits in &logits[1..] {
                    // A lane other than 0 cannot end the chunk.
                    let c = self.pick(lane_logits, |c| c != eos);
                    group.push(self.vocab.slot_from_class(c));
                }
                group
            }
            LengthControl::Oracle { rate } => {
                let target = rate * len;
                if emitted >= target {
                    return end_group(k);
                }
                (0..k)
                    .map(|lane| {
                        if emitted + lane < target {
                            SpeechSlot::Code(self.pick(&logits[lane], |c| c < n_speech) as u32)
                        } else {
                            SpeechSlot::Pad
                        }
                    })
                    .collect()
            }
        }
    }

    /// Closes the run with a `done` event.
    pub fn finish(mut self) -> GenerateOutput {
        self.log(EventKind::Done { steps: self.step, codes: self.codes.len() });
        let elapsed_ns = self.clock.now_ns().saturating_sub(self.started_ns);
        GenerateOutput {
            codes: self.codes,
            chunks: self.chunks,
            history: self.history,
            events: self.events,
            steps: self.step,
            elapsed_ns,
        }
    }
}

/// Offline generation over a complete text.
pub fn generate<M: StepModel>(
    text: &[u32],
    model: &M,
    options: DecodeOptions,
    clock: Arc<dyn Clock>,
) -> Result<GenerateOutput, DecodeError> {
    let plan = plan_chunks(text, options.policy)?;
    let mut decoder = Decoder::new(model, options, clock)?;
    for chunk in plan.chunks(text) {
        if let Err(err) = decoder.decode_chunk(chunk) {
            return Err(match err {
                DecodeError::Truncated { chunk, steps } => {
                    DecodeError::Partial { chunk, steps, output: Box::new(decoder.finish()) }
                }
                other => other,
            });
        }
    }
    Ok(decoder.finish())
}

/// [`generate`] with a logical clock, for reproducible event logs.
pub fn generate_logical<M: StepModel>(text: &[u32], model: &M, options: DecodeOptions) -> Result<GenerateOutput, DecodeError> {
    generate(text, model, options, Arc::new(LogicalClock::default()))
}
