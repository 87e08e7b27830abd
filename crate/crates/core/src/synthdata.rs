//! Deterministic stand-in for a speech tokenizer, plus the synthetic corpus
//! built on it.
//!
//! Text token `x` at sentence position `p` becomes `m` codes
//! `c_j = (a·x + b·j + p) mod n_speech`, so every token's codes depend on
//! where it sits in its sentence. Decoding inverts each `m`-code block by
//! majority vote, which keeps isolated model errors from wiping out a token.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::rng::Rng;
use crate::vocab::SpeechSlot;

/// Token id used when a block's majority does not map to a valid text token.
pub const UNKNOWN_TOKEN: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid oracle field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("text token {token} at index {index} is outside 0..{n_text}")]
    Token { token: u32, index: usize, n_text: usize },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub n_text: usize,
    pub n_speech: usize,
    /// Speech codes per text token.
    pub rate_ratio: usize,
    pub a: u64,
    pub b: u64,
    pub token_rate_hz: f64,
    /// Token that ends a sentence and resets the position term.
    pub delimiter: Option<u32>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { n_text: 32, n_speech: 64, rate_ratio: 8, a: 5, b: 3, token_rate_hz: 25.0, delimiter: Some(31) }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Modular inverse of `a` mod `n`; `a` and `n` must be coprime.
fn mod_inverse(a: u64, n: u64) -> u64 {
    let (mut t, mut new_t) = (0i128, 1i128);
    let (mut r, mut new_r) = (n as i128, (a % n) as i128);
    while new_r != 0 {
        let q = r / new_r;
        (t, new_t) = (new_t, t - q * new_t);
        (r, new_r) = (new_r, r - q * new_r);
    }
    t.rem_euclid(n as i128) as u64
}

impl OracleSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: String| Err(SynthError::Config { field, reason });
        if self.n_text == 0 {
            return bad("n_text", "must be positive".into());
        }
        if self.n_speech < 2 {
            return bad("n_speech", "must be at least 2".into());
        }
        if self.rate_ratio == 0 {
            return bad("rate_ratio", "must be at least 1".into());
        }
        if gcd(self.a, self.n_speech as u64) != 1 {
            return bad("a", format!("{} is not coprime with n_speech {}", self.a, self.n_speech));
        }
        if gcd(self.b, self.n_speech as u64) != 1 && self.b != 0 {
            return bad("b", format!("{} is not coprime with n_speech {}", self.b, self.n_speech));
        }
        if !(self.token_rate_hz > 0.0 && self.token_rate_hz.is_finite()) {
            return bad("token_rate_hz", format!("{} is not a positive rate", self.token_rate_hz));
        }
        if let Some(d) = self.delimiter {
            if d as usize >= self.n_text {
                return bad("delimiter", format!("{d} is outside 0..{}", self.n_text));
            }
        }
        Ok(())
    }

    /// Code `j` of token `x` at position `p`.
    pub fn code(&self, x: u32, j: usize, p: usize) -> u32 {
        let n = self.n_speech as u64;
        ((self.a % n * (x as u64 % n) + self.b % n * (j as u64 % n) + p as u64 % n) % n) as u32
    }

    /// Position of the token following `token` at position `p`.
    pub fn next_position(&self, token: u32, p: usize) -> usize {
        if Some(token) == self.delimiter {
            0
        } else {
            p + 1
        }
    }

    /// Sentence-local position of every token of `text`.
    pub fn positions(&self, text: &[u32]) -> Vec<usize> {
        let mut p = 0;
        text.iter()
            .map(|&t| {
                let here = p;
                p = self.next_position(t, p);
                here
            })
            .collect()
    }
}

/// The `m` codes for `text` followed by a single `Eos`.
pub fn oracle_encode(text: &[u32], spec: &OracleSpec) -> Result<Vec<SpeechSlot>, SynthError> {
    let mut out = Vec::with_capacity(text.len() * spec.rate_ratio + 1);
    for (index, (&x, p)) in text.iter().zip(spec.positions(text)).enumerate() {
        if x as usize >= spec.n_text {
            return Err(SynthError::Token { token: x, index, n_text: spec.n_text });
        }
        out.extend((0..spec.rate_ratio).map(|j| SpeechSlot::Code(spec.code(x, j, p))));
    }
    out.push(SpeechSlot::Eos);
    Ok(out)
}

/// Result of inverting a code stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: Vec<u32>,
    /// `true` where every code of the block agreed and the block was complete.
    pub clean: Vec<bool>,
    /// The stream ended inside a block.
    pub partial_tail: bool,
}

/// Inverts `codes` block by block. Codes at or beyond `n_speech` count as votes
/// for [`UNKNOWN_TOKEN`].
pub fn oracle_decode(codes: &[u32], spec: &OracleSpec) -> Decoded {
    oracle_decode_from(codes, spec, 0).0
}

/// [`oracle_decode`] starting at sentence position `start`; also returns the
/// position after the last block.
pub fn oracle_decode_from(codes: &[u32], spec: &OracleSpec, start: usize) -> (Decoded, usize) {
    let n = spec.n_speech as u64;
    let a_inv = mod_inverse(spec.a, n);
    let m = spec.rate_ratio;
    let mut text = Vec::with_capacity(codes.len().div_ceil(m));
    let mut clean = Vec::with_capacity(text.capacity());
    let mut p = start;
    let mut votes: Vec<(u32, usize)> = Vec::with_capacity(m);
    for block in codes.chunks(m) {
        votes.clear();
        for (j, &c) in block.iter().enumerate() {
            let implied = if (c as u64) < n {
                let shift = (spec.b % n * (j as u64 % n) + p as u64 % n) % n;
                let x = (a_inv * ((c as u64 + n - shift) % n)) % n;
                if (x as usize) < spec.n_text {
                    x as u32
                } else {
                    UNKNOWN_TOKEN
                }
            } else {
                UNKNOWN_TOKEN
            };
            match votes.iter_mut().find(|(v, _)| *v == implied) {
                Some((_, count)) => *count += 1,
                None => votes.push((implied, 1)),
            }
        }
        // First-seen wins ties, so the result does not depend on hashing.
        let (winner, count) = votes.iter().fold((UNKNOWN_TOKEN, 0), |best, &(v, c)| if c > best.1 { (v, c) } else { best });
        text.push(winner);
        clean.push(count == m && winner != UNKNOWN_TOKEN);
        p = spec.next_position(winner, p);
    }
    (Decoded { text, clean, partial_tail: codes.len() % m != 0 }, p)
}

/// Codes of a speech stream up to its first `Eos`; `Pad` slots are skipped.
pub fn stream_codes(slots: &[SpeechSlot]) -> Vec<u32> {
    slots
        .iter()
        .take_while(|s| **s != SpeechSlot::Eos)
        .filter_map(|s| match s {
            SpeechSlot::Code(c) => Some(*c),
            _ => None,
        })
        .collect()
}

/// Distribution of text lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDist {
    Fixed(usize),
    /// Uniform over `min..=max`.
    Uniform { min: usize, max: usize },
    /// Weighted choice among explicit lengths.
    Choice(Vec<(usize, f64)>),
}

impl LengthDist {
    pub fn sample(&self, rng: &mut Rng) -> usize {
        match self {
            LengthDist::Fixed(n) => *n,
            LengthDist::Uniform { min, max } => rng.range_inclusive(*min, *max),
            LengthDist::Choice(options) => {
                let weights: Vec<f64> = options.iter().map(|(_, w)| *w).collect();
                options[rng.weighted(&weights)].0
            }
        }
    }

    /// Probability of each supported length, in increasing length order.
    pub fn probabilities(&self) -> Vec<(usize, f64)> {
        match self {
            LengthDist::Fixed(n) => vec![(*n, 1.0)],
            LengthDist::Uniform { min, max } => {
                let p = 1.0 / (max - min + 1) as f64;
                (*min..=*max).map(|l| (l, p)).collect()
            }
            LengthDist::Choice(options) => {
                let total: f64 = options.iter().map(|(_, w)| w).sum();
                let mut out: Vec<(usize, f64)> = Vec::new();
                for &(l, w) in options {
                    match out.iter_mut().find(|(x, _)| *x == l) {
                        Some((_, p)) => *p += w / total,
                        None => out.push((l, w / total)),
                    }
                }
                out.sort_by_key(|(l, _)| *l);
                out
            }
        }
    }

    /// Smallest length with positive probability.
    pub fn min(&self) -> usize {
        self.probabilities().iter().find(|(_, p)| *p > 0.0).map_or(0, |(l, _)| *l)
    }

    /// Largest length with positive probability.
    pub fn max(&self) -> usize {
        self.probabilities().iter().rev().find(|(_, p)| *p > 0.0).map_or(0, |(l, _)| *l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub heldout_short: usize,
    pub heldout_long: usize,
    pub short_lengths: LengthDist,
    pub long_lengths: LengthDist,
    /// Sentence length range, delimiter included.
    pub sentence_min: usize,
    pub sentence_max: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 4000,
            heldout_short: 64,
            heldout_long: 16,
            short_lengths: LengthDist::Uniform { min: 4, max: 32 },
            long_lengths: LengthDist::Uniform { min: 256, max: 320 },
            sentence_min: 3,
            sentence_max: 12,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: String| Err(SynthError::Config { field, reason });
        if self.sentence_min == 0 || self.sentence_min > self.sentence_max {
            return bad("sentence_min", format!("range {}..={} is empty", self.sentence_min, self.sentence_max));
        }
        for (field, dist) in [("short_lengths", &self.short_lengths), ("long_lengths", &self.long_lengths)] {
            if let LengthDist::Uniform { min, max } = dist {
                if min > max {
                    return bad(field, format!("range {min}..={max} is empty"));
                }
            }
            if let LengthDist::Choice(options) = dist {
                if options.is_empty() || options.iter().any(|(_, w)| !(*w >= 0.0)) || options.iter().all(|(_, w)| *w == 0.0) {
                    return bad(field, "needs at least one positive weight".into());
                }
            }
            if dist.min() == 0 {
                return bad(field, "lengths must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldoutShort,
    HeldoutLong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub text: Vec<u32>,
    /// `rate_ratio · text.len()` codes and a trailing `Eos`.
    pub speech: Vec<SpeechSlot>,
    pub bucket: u32,
}

/// Length bucket: `ceil(log2(len))`.
pub fn bucket_of(len: usize) -> u32 {
    len.max(1).next_power_of_two().trailing_zeros()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: OracleSpec,
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Vec<SynthSample>,
    pub heldout_short: Vec<SynthSample>,
    pub heldout_long: Vec<SynthSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SynthSample] {
        match split {
            Split::Train => &self.train,
            Split::HeldoutShort => &self.heldout_short,
            Split::HeldoutLong => &self.heldout_long,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.heldout_short.len() + self.heldout_long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random text of exactly `len` tokens made of delimiter-terminated sentences.
pub fn random_text(len: usize, spec: &OracleSpec, config: &DatasetConfig, rng: &mut Rng) -> Vec<u32> {
    let words: Vec<u32> = (0..spec.n_text as u32).filter(|t| Some(*t) != spec.delimiter).collect();
    let mut text = Vec::with_capacity(len + config.sentence_max);
    while text.len() < len {
        let sentence = rng.range_inclusive(config.sentence_min, config.sentence_max);
        let body = if spec.delimiter.is_some() { sentence - 1 } else { sentence };
        for _ in 0..body {
            text.push(words[rng.below(words.len())]);
        }
        if let Some(d) = spec.delimiter {
            text.push(d);
        }
    }
    text.truncate(len);
    text
}

fn make_sample(len: usize, spec: &OracleSpec, config: &DatasetConfig, rng: &mut Rng) -> SynthSample {
    let text = random_text(len, spec, config, rng);
    let speech = oracle_encode(&text, spec).expect("generated tokens are in range");
    SynthSample { bucket: bucket_of(text.len()), text, speech }
}

pub fn make_dataset(config: &DatasetConfig, spec: &OracleSpec, seed: u64) -> Result<Dataset, SynthError> {
    spec.validate()?;
    config.validate()?;
    let mut rng = Rng::seed(seed);
    let split = |count: usize, dist: &LengthDist, rng: &mut Rng| {
        let mut local = rng.fork();
        (0..count)
            .map(|_| {
                let len = dist.sample(&mut local);
                make_sample(len, spec, config, &mut local)
            })
            .collect::<Vec<_>>()
    };
    let train = split(config.train, &config.short_lengths, &mut rng);
    let heldout_short = split(config.heldout_short, &config.short_lengths, &mut rng);
    let heldout_long = split(config.heldout_long, &config.long_lengths, &mut rng);
    Ok(Dataset { spec: spec.clone(), config: config.clone(), seed, train, heldout_short, heldout_long })
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: OracleSpec,
    config: DatasetConfig,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    split: Split,
    text: Vec<u32>,
    speech: Vec<SpeechSlot>,
    bucket: u32,
}

/// Writes a header line followed by one JSON record per sample.
pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> Result<(), SynthError> {
    let header = HeaderLine {
        header: Header { spec: dataset.spec.clone(), config: dataset.config.clone(), seed: dataset.seed },
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for split in [Split::Train, Split::HeldoutShort, Split::HeldoutLong] {
        for s in dataset.split(split) {
            let rec = RecordLine { split, text: s.text.clone(), speech: s.speech.clone(), bucket: s.bucket };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset, SynthError> {
    let mut lines = input.lines();
    let first = lines.next().ok_or(SynthError::Format { line: 1, reason: "missing header".into() })??;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| SynthError::Format { line: 1, reason: e.to_string() })?;
    header.header.spec.validate()?;
    let mut dataset = Dataset {
        spec: header.header.spec,
        config: header.header.config,
        seed: header.header.seed,
        train: Vec::new(),
        heldout_short: Vec::new(),
        heldout_long: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| SynthError::Format { line: i + 2, reason: e.to_string() })?;
        let sample = SynthSample { text: rec.text, speech: rec.speech, bucket: rec.bucket };
        match rec.split {
            Split::Train => dataset.train.push(sample),
            Split::HeldoutShort => dataset.heldout_short.push(sample),
            Split::HeldoutLong => dataset.heldout_long.push(sample),
        }
    }
    Ok(dataset)
}
