//! Scoring: edit-distance error rates, fixed-window transcription,
//! dual-reference scoring, real-time factor and per-category reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::{oracle_decode_from, OracleSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty reference")]
    EmptyReference,
    #[error("no scores to aggregate")]
    NoScores,
    #[error("invalid timing: {0}")]
    Timing(String),
}

/// Levenshtein distance with unit substitution, deletion and insertion costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance divided by the reference length; may exceed 1.
pub fn edit_distance_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Word,
    Char,
}

/// Error rate between two strings, split into whitespace words or characters.
pub fn text_error_rate(hyp: &str, reference: &str, unit: Unit) -> Result<f64, EvalError> {
    match unit {
        Unit::Word => {
            let h: Vec<&str> = hyp.split_whitespace().collect();
            let r: Vec<&str> = reference.split_whitespace().collect();
            edit_distance_rate(&h, &r)
        }
        Unit::Char => {
            let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
            let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
            edit_distance_rate(&h, &r)
        }
    }
}

/// Tokens covered by a window of `seconds` at `rate_hz`.
pub fn window_tokens(seconds: f64, rate_hz: f64) -> usize {
    ((seconds * rate_hz).round() as usize).max(1)
}

/// Consecutive windows of `window` tokens covering `0..len`; the last may be short.
pub fn segment_windows(len: usize, window: usize) -> Vec<(usize, usize)> {
    let window = window.max(1);
    (0..len).step_by(window).map(|a| (a, (a + window).min(len))).collect()
}

/// Turns windows of speech codes into text tokens. State may carry across windows.
pub trait Transcriber {
    fn transcribe(&mut self, window: &[u32]) -> Vec<u32>;
    /// Called once after the last window.
    fn finish(&mut self) -> Vec<u32> {
        Vec::new()
    }
}

/// Returns every window unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityTranscriber;

impl Transcriber for IdentityTranscriber {
    fn transcribe(&mut self, window: &[u32]) -> Vec<u32> {
        window.to_vec()
    }
}

/// Inverts the synthetic tokenizer window by window. Blocks split by a window
/// edge are completed from the next window and the sentence position carries
/// over, so the result equals decoding the whole stream at once.
#[derive(Debug, Clone)]
pub struct OracleTranscriber {
    spec: OracleSpec,
    carry: Vec<u32>,
    position: usize,
}

impl OracleTranscriber {
    pub fn new(spec: OracleSpec) -> Self {
        Self { spec, carry: Vec::new(), position: 0 }
    }

    fn decode_blocks(&mut self, codes: &[u32]) -> Vec<u32> {
        let (decoded, next) = oracle_decode_from(codes, &self.spec, self.position);
        self.position = next;
        decoded.text
    }
}

impl Transcriber for OracleTranscriber {
    fn transcribe(&mut self, window: &[u32]) -> Vec<u32> {
        let m = self.spec.rate_ratio;
        self.carry.extend_from_slice(window);
        let full = self.carry.len() / m * m;
        let ready: Vec<u32> = self.carry.drain(..full).collect();
        self.decode_blocks(&ready)
    }

    fn finish(&mut self) -> Vec<u32> {
        let rest = std::mem::take(&mut self.carry);
        if rest.is_empty() {
            Vec::new()
        } else {
            self.decode_blocks(&rest)
        }
    }
}

/// Splits `stream` into windows of `window_seconds` and concatenates the
/// transcriber's output in order.
pub fn segment_transcribe(
    stream: &[u32],
    window_seconds: f64,
    rate_hz: f64,
    transcriber: &mut dyn Transcriber,
) -> Vec<u32> {
    let mut out = Vec::new();
    for (a, b) in segment_windows(stream.len(), window_tokens(window_seconds, rate_hz)) {
        out.extend(transcriber.transcribe(&stream[a..b]));
    }
    out.extend(transcriber.finish());
    out
}

/// Rewrites token sequences into a spoken-form reference.
pub trait Normalizer {
    fn normalize(&self, tokens: &[u32]) -> Vec<u32>;
}

/// Left-to-right rewrite rules; the first rule matching at a position wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleNormalizer {
    pub rules: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Normalizer for RuleNormalizer {
    fn normalize(&self, tokens: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        'outer: while i < tokens.len() {
            for (pattern, replacement) in &self.rules {
                if !pattern.is_empty() && tokens[i..].starts_with(pattern) {
                    out.extend_from_slice(replacement);
                    i += pattern.len();
                    continue 'outer;
                }
            }
            out.push(tokens[i]);
            i += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub hypothesis: Vec<u32>,
    pub truth: Vec<u32>,
    pub normalized: Option<Vec<u32>>,
    pub category: String,
}

/// `min(rate(T, G), rate(T, N))`, or `rate(T, G)` without a normalized reference.
pub fn dual_reference_score(sample: &EvalSample) -> Result<f64, EvalError> {
    let raw = edit_distance_rate(&sample.hypothesis, &sample.truth)?;
    match &sample.normalized {
        Some(n) if !n.is_empty() => Ok(raw.min(edit_distance_rate(&sample.hypothesis, n)?)),
        _ => Ok(raw),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub wall_seconds: f64,
    pub tokens: usize,
    pub token_rate_hz: f64,
}

/// Wall-clock time over the duration the tokens represent.
pub fn rtf(timing: &TimingRecord) -> Result<f64, EvalError> {
    if timing.tokens == 0 {
        return Err(EvalError::Timing("zero tokens".into()));
    }
    if !(timing.token_rate_hz > 0.0) || !(timing.wall_seconds >= 0.0) {
        return Err(EvalError::Timing(format!("{timing:?}")));
    }
    Ok(timing.wall_seconds / (timing.tokens as f64 / timing.token_rate_hz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: String,
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Sorted by category name; categories without scores do not appear.
    pub categories: Vec<CategoryStats>,
    pub count: usize,
    /// Mean over all scores, i.e. category means weighted by count.
    pub overall: f64,
}

pub fn aggregate(scores: &[(String, f64)]) -> Result<Report, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    let mut names: Vec<&str> = scores.iter().map(|(c, _)| c.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let categories: Vec<CategoryStats> = names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = scores.iter().filter(|(c, _)| c == name).map(|(_, v)| *v).collect();
            CategoryStats {
                category: name.to_string(),
                count: values.len(),
                mean: values.iter().sum::<f64>() / values.len() as f64,
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let count: usize = categories.iter().map(|c| c.count).sum();
    let overall = categories.iter().map(|c| c.mean * c.count as f64).sum::<f64>() / count as f64;
    Ok(Report { categories, count, overall })
}

impl Report {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "category,samples,avg,max")?;
        for c in &self.categories {
            writeln!(out, "{},{},{},{}", c.category, c.count, c.mean, c.max)?;
        }
        let max = self.categories.iter().map(|c| c.max).fold(f64::NEG_INFINITY, f64::max);
        writeln!(out, "overall,{},{},{}", self.count, self.overall, max)?;
        out.flush()
    }

    /// Fixed-width table; rates are unclipped, so averages may exceed 1.
    pub fn table(&self) -> String {
        let width = self.categories.iter().map(|c| c.category.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>8}  {:>8}", "category", "samples", "avg", "max");
        for c in &self.categories {
            let _ = writeln!(s, "{:<width$}  {:>7}  {:>8.4}  {:>8.4}", c.category, c.count, c.mean, c.max);
        }
        let max = self.categories.iter().map(|c| c.max).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>8.4}  {:>8.4}", "overall", self.count, self.overall, max);
        s
    }
}
