//! Extended vocabulary: one id space holding the text ids, `k` lanes of
//! speech ids and a handful of special ids.
//!
//! Layout: `[text][lane 0 speech]…[lane k-1 speech][specials]`. The
//! specials are `TEXT_PAD`, `CHUNK_BOS`, `CHUNK_EOS`, then one `SPEECH_PAD`
//! per lane, then one `SPEECH_EOS` per lane (`3 + 2k` ids in total).
//! [`ExtendedVocab::size`] reports `|V_text| + k·|V_speech|` without them;
//! [`ExtendedVocab::total_ids`] is the number of embedding rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary field `{field}` must be at least 1")]
    ZeroSize { field: &'static str },
    #[error("vocabulary of {0} ids does not fit in u32")]
    Overflow(u64),
    #[error("lane {lane} out of range for parallel size {k}")]
    Lane { lane: usize, k: usize },
    #[error("speech code {code} out of range for {n_speech} codes")]
    Code { code: u32, n_speech: usize },
    #[error("text id {id} out of range for {n_text} text ids")]
    Text { id: u32, n_text: usize },
    #[error("id {id} outside the extended vocabulary of {total} ids")]
    Id { id: u32, total: usize },
    #[error("step carries {got} speech slots, expected {k}")]
    SlotCount { got: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedVocab {
    n_text: usize,
    n_speech: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    TextPad,
    ChunkBos,
    ChunkEos,
    SpeechPad { lane: usize },
    SpeechEos { lane: usize },
}

/// What an extended id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Text(u32),
    Speech { lane: usize, code: u32 },
    Special(Special),
}

/// Content of the text slot of one decoding step.
///
/// Serialized as the bare token id, or `"pad"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SlotRepr", into = "SlotRepr")]
pub enum TextSlot {
    Token(u32),
    Pad,
}

/// Content of one speech lane of one decoding step.
///
/// Serialized as the bare code, `"pad"` or `"eos"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SlotRepr", into = "SlotRepr")]
pub enum SpeechSlot {
    Code(u32),
    Pad,
    Eos,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SlotRepr {
    Id(u32),
    Word(String),
}

impl From<TextSlot> for SlotRepr {
    fn from(slot: TextSlot) -> Self {
        match slot {
            TextSlot::Token(t) => SlotRepr::Id(t),
            TextSlot::Pad => SlotRepr::Word("pad".into()),
        }
    }
}

impl TryFrom<SlotRepr> for TextSlot {
    type Error = String;
    fn try_from(r: SlotRepr) -> Result<Self, String> {
        match r {
            SlotRepr::Id(t) => Ok(TextSlot::Token(t)),
            SlotRepr::Word(w) if w == "pad" => Ok(TextSlot::Pad),
            SlotRepr::Word(w) => Err(format!("unknown text slot {w:?}")),
        }
    }
}

impl From<SpeechSlot> for SlotRepr {
    fn from(slot: SpeechSlot) -> Self {
        match slot {
            SpeechSlot::Code(c) => SlotRepr::Id(c),
            SpeechSlot::Pad => SlotRepr::Word("pad".into()),
            SpeechSlot::Eos => SlotRepr::Word("eos".into()),
        }
    }
}

impl TryFrom<SlotRepr> for SpeechSlot {
    type Error = String;
    fn try_from(r: SlotRepr) -> Result<Self, String> {
        match r {
            SlotRepr::Id(c) => Ok(SpeechSlot::Code(c)),
            SlotRepr::Word(w) if w == "pad" => Ok(SpeechSlot::Pad),
            SlotRepr::Word(w) if w == "eos" => Ok(SpeechSlot::Eos),
            SlotRepr::Word(w) => Err(format!("unknown speech slot {w:?}")),
        }
    }
}

/// One decoding step: a text slot and exactly `k` speech slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepTokens {
    pub text: TextSlot,
    pub speech: Vec<SpeechSlot>,
}

impl StepTokens {
    pub fn new(text: TextSlot, speech: Vec<SpeechSlot>) -> Self {
        Self { text, speech }
    }

    /// Text slot plus `k` padded speech lanes.
    pub fn padded(text: TextSlot, k: usize) -> Self {
        Self { text, speech: vec![SpeechSlot::Pad; k] }
    }
}

impl ExtendedVocab {
    pub fn new(n_text: usize, n_speech: usize, k: usize) -> Result<Self, VocabError> {
        for (field, v) in [("n_text", n_text), ("n_speech", n_speech), ("k", k)] {
            if v == 0 {
                return Err(VocabError::ZeroSize { field });
            }
        }
        let total = n_text as u64 + (k as u64) * (n_speech as u64) + 3 + 2 * k as u64;
        if total > u32::MAX as u64 {
            return Err(VocabError::Overflow(total));
        }
        Ok(Self { n_text, n_speech, k })
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_speech(&self) -> usize {
        self.n_speech
    }

    /// Parallel size: speech tokens per step.
    pub fn k(&self) -> usize {
        self.k
    }

    /// `|V_text| + k·|V_speech|`.
    pub fn size(&self) -> usize {
        self.n_text + self.k * self.n_speech
    }

    pub fn special_count(&self) -> usize {
        3 + 2 * self.k
    }

    /// Number of distinct ids, specials included.
    pub fn total_ids(&self) -> usize {
        self.size() + self.special_count()
    }

    /// Width of one lane's output distribution: the codes plus that lane's
    /// `SPEECH_PAD` and `SPEECH_EOS`.
    pub fn lane_classes(&self) -> usize {
        self.n_speech + 2
    }

    fn special_base(&self) -> u32 {
        self.size() as u32
    }

    pub fn text_id(&self, token: u32) -> Result<u32, VocabError> {
        if token as usize >= self.n_text {
            return Err(VocabError::Text { id: token, n_text: self.n_text });
        }
        Ok(token)
    }

    pub fn encode_speech(&self, lane: usize, code: u32) -> Result<u32, VocabError> {
        if lane >= self.k {
            return Err(VocabError::Lane { lane, k: self.k });
        }
        if code as usize >= self.n_speech {
            return Err(VocabError::Code { code, n_speech: self.n_speech });
        }
        Ok((self.n_text + lane * self.n_speech) as u32 + code)
    }

    pub fn special_id(&self, special: Special) -> Result<u32, VocabError> {
        let base = self.special_base();
        let check = |lane: usize| {
            if lane >= self.k {
                Err(VocabError::Lane { lane, k: self.k })
            } else {
                Ok(lane as u32)
            }
        };
        Ok(match special {
            Special::TextPad => base,
            Special::ChunkBos => base + 1,
            Special::ChunkEos => base + 2,
            Special::SpeechPad { lane } => base + 3 + check(lane)?,
            Special::SpeechEos { lane } => base + 3 + self.k as u32 + check(lane)?,
        })
    }

    pub fn decode(&self, id: u32) -> Result<TokenClass, VocabError> {
        let idx = id as usize;
        if idx < self.n_text {
            return Ok(TokenClass::Text(id));
        }
        if idx < self.size() {
            let off = idx - self.n_text;
            return Ok(TokenClass::Speech { lane: off / self.n_speech, code: (off % self.n_speech) as u32 });
        }
        let s = idx - self.size();
        let k = self.k;
        let special = match s {
            0 => Special::TextPad,
            1 => Special::ChunkBos,
            2 => Special::ChunkEos,
            s if s < 3 + k => Special::SpeechPad { lane: s - 3 },
            s if s < 3 + 2 * k => Special::SpeechEos { lane: s - 3 - k },
            _ => return Err(VocabError::Id { id, total: self.total_ids() }),
        };
        Ok(TokenClass::Special(special))
    }

    pub fn text_slot_id(&self, slot: TextSlot) -> Result<u32, VocabError> {
        match slot {
            TextSlot::Token(t) => self.text_id(t),
            TextSlot::Pad => self.special_id(Special::TextPad),
        }
    }

    pub fn speech_slot_id(&self, lane: usize, slot: SpeechSlot) -> Result<u32, VocabError> {
        match slot {
            SpeechSlot::Code(c) => self.encode_speech(lane, c),
            SpeechSlot::Pad => self.special_id(Special::SpeechPad { lane }),
            SpeechSlot::Eos => self.special_id(Special::SpeechEos { lane }),
        }
    }

    /// The `k + 1` extended ids of a step: text first, then lanes in order.
    pub fn step_ids(&self, step: &StepTokens) -> Result<Vec<u32>, VocabError> {
        if step.speech.len() != self.k {
            return Err(VocabError::SlotCount { got: step.speech.len(), k: self.k });
        }
        let mut ids = Vec::with_capacity(self.k + 1);
        ids.push(self.text_slot_id(step.text)?);
        for (lane, slot) in step.speech.iter().enumerate() {
            ids.push(self.speech_slot_id(lane, *slot)?);
        }
        Ok(ids)
    }

    /// Index of `slot` within one lane's output distribution.
    pub fn lane_class(&self, slot: SpeechSlot) -> Result<usize, VocabError> {
        match slot {
            SpeechSlot::Code(c) if (c as usize) < self.n_speech => Ok(c as usize),
            SpeechSlot::Code(c) => Err(VocabError::Code { code: c, n_speech: self.n_speech }),
            SpeechSlot::Pad => Ok(self.n_speech),
            SpeechSlot::Eos => Ok(self.n_speech + 1),
        }
    }

    /// Inverse of [`lane_class`](Self::lane_class).
    pub fn slot_from_class(&self, class: usize) -> SpeechSlot {
        match class {
            c if c < self.n_speech => SpeechSlot::Code(c as u32),
            c if c == self.n_speech => SpeechSlot::Pad,
            _ => SpeechSlot::Eos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn slots_serialize_compactly() {
        let step = StepTokens::new(TextSlot::Pad, vec![SpeechSlot::Code(7), SpeechSlot::Pad, SpeechSlot::Eos]);
        let json = serde_json::to_string(&step).unwrap();
        assert_eq!(json, r#"{"text":"pad","speech":[7,"pad","eos"]}"#);
        assert_eq!(serde_json::from_str::<StepTokens>(&json).unwrap(), step);
        assert!(serde_json::from_str::<SpeechSlot>(r#""bos""#).is_err());
    }

    #[test]
    fn size_law() {
        let v = ExtendedVocab::new(1000, 500, 4).unwrap();
        assert_eq!(v.size(), 3000);
        assert_eq!(v.special_count(), 11);
        assert_eq!(v.total_ids(), 3011);
        let v1 = ExtendedVocab::new(1000, 500, 1).unwrap();
        assert_eq!(v1.size(), 1500);
    }

    #[test]
    fn large_text_vocab_fits() {
        let v = ExtendedVocab::new(151_936, 6561, 4).unwrap();
        assert_eq!(v.size(), 151_936 + 4 * 6561);
        let id = v.encode_speech(3, 6560).unwrap();
        assert_eq!(v.decode(id).unwrap(), TokenClass::Speech { lane: 3, code: 6560 });
        assert!(ExtendedVocab::new(usize::MAX / 4, 4, 4).is_err());
    }

    #[test]
    fn zero_sizes_rejected() {
        assert_eq!(ExtendedVocab::new(0, 5, 2), Err(VocabError::ZeroSize { field: "n_text" }));
        assert_eq!(ExtendedVocab::new(5, 0, 2), Err(VocabError::ZeroSize { field: "n_speech" }));
        assert_eq!(ExtendedVocab::new(5, 5, 0), Err(VocabError::ZeroSize { field: "k" }));
    }

    #[test]
    fn first_speech_id_follows_text_block() {
        let v = ExtendedVocab::new(10, 16, 4).unwrap();
        assert_eq!(v.encode_speech(0, 0).unwrap(), 10);
        assert_eq!(v.encode_speech(1, 0).unwrap(), 26);
    }

    #[test]
    fn exhaustive_round_trip_and_classification() {
        let v = ExtendedVocab::new(7, 16, 4).unwrap();
        let mut seen = HashSet::new();
        for lane in 0..4 {
            for code in 0..16 {
                let id = v.encode_speech(lane, code).unwrap();
                assert!(seen.insert(id), "collision at lane {lane} code {code}");
                assert_eq!(v.decode(id).unwrap(), TokenClass::Speech { lane, code });
            }
        }
        // Every id in range decodes to exactly one class; the count matches.
        let mut texts = 0;
        let mut speech = 0;
        let mut specials = HashSet::new();
        for id in 0..v.total_ids() as u32 {
            match v.decode(id).unwrap() {
                TokenClass::Text(_) => texts += 1,
                TokenClass::Speech { .. } => speech += 1,
                TokenClass::Special(s) => {
                    assert_eq!(v.special_id(s).unwrap(), id);
                    specials.insert(id);
                }
            }
        }
        assert_eq!((texts, speech, specials.len()), (7, 64, v.special_count()));
        assert!(v.decode(v.total_ids() as u32).is_err());
    }

    #[test]
    fn pad_decodes_as_special() {
        let v = ExtendedVocab::new(5, 8, 2).unwrap();
        let id = v.special_id(Special::TextPad).unwrap();
        assert_eq!(v.decode(id).unwrap(), TokenClass::Special(Special::TextPad));
    }

    #[test]
    fn out_of_range_lane_and_code() {
        let v = ExtendedVocab::new(5, 8, 2).unwrap();
        assert_eq!(v.encode_speech(2, 0), Err(VocabError::Lane { lane: 2, k: 2 }));
        assert_eq!(v.encode_speech(0, 8), Err(VocabError::Code { code: 8, n_speech: 8 }));
        let bad = StepTokens::padded(TextSlot::Pad, 3);
        assert_eq!(v.step_ids(&bad), Err(VocabError::SlotCount { got: 3, k: 2 }));
    }

    #[test]
    fn lane_classes_round_trip() {
        let v = ExtendedVocab::new(5, 8, 2).unwrap();
        for class in 0..v.lane_classes() {
            assert_eq!(v.lane_class(v.slot_from_class(class)).unwrap(), class);
        }
    }
}
