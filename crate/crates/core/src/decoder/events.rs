use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::vocab::SpeechSlot;

use super::layout::schedule_steps;

/// Source of event timestamps in nanoseconds.
pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

/// Nanoseconds since construction, from the monotonic clock.
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A counter that advances by one per reading; makes event logs reproducible.
#[derive(Debug, Default)]
pub struct LogicalClock {
    tick: AtomicU64,
}

impl Clock for LogicalClock {
    fn now_ns(&self) -> u64 {
        self.tick.fetch_add(1, Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    ChunkStart { chunk: usize, tokens: Vec<u32> },
    /// The `k` slots emitted at one step; all `Pad` during the delay.
    Speech { chunk: usize, local_step: usize, slots: Vec<SpeechSlot> },
    ChunkEnd { chunk: usize, steps: usize, codes: usize },
    /// A text token arriving from the producer, stamped on the producer side.
    Text { token: u32 },
    Error { message: String },
    Done { steps: usize, codes: usize },
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// Global decoding steps completed before this event.
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
    pub t_ns: u64,
}

pub fn write_events(events: &[StreamEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_events(input: impl BufRead) -> Result<Vec<StreamEvent>, String> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("event line {}: {e}", i + 1))?);
    }
    Ok(out)
}

/// Step accounting of one chunk reconstructed from an event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkAudit {
    pub chunk: usize,
    pub text_len: usize,
    pub steps: usize,
    /// Slots emitted up to and including lane-0 `SPEECH_EOS`.
    pub speech_slots: usize,
    pub expected_steps: usize,
    /// Number of leading steps whose emitted lanes are all `Pad`.
    pub leading_pad_steps: usize,
}

impl ChunkAudit {
    pub fn ok(&self, delay: usize) -> bool {
        self.steps == self.expected_steps && self.leading_pad_steps >= delay
    }
}

/// Rebuilds per-chunk step counts from `events` and compares them with
/// `max(len, d + ceil(S / k))`.
pub fn audit_schedule(events: &[StreamEvent], delay: usize, k: usize) -> Vec<ChunkAudit> {
    let mut audits: Vec<ChunkAudit> = Vec::new();
    let mut ended = false;
    let mut groups = 0;
    let mut leading = true;
    for e in events {
        match &e.kind {
            EventKind::ChunkStart { chunk, tokens } => {
                audits.push(ChunkAudit {
                    chunk: *chunk,
                    text_len: tokens.len(),
                    steps: 0,
                    speech_slots: 0,
                    expected_steps: 0,
                    leading_pad_steps: 0,
                });
                ended = false;
                groups = 0;
                leading = true;
            }
            EventKind::Speech { slots, .. } => {
                let Some(a) = audits.last_mut() else { continue };
                a.steps += 1;
                let all_pad = slots.iter().all(|s| *s == SpeechSlot::Pad);
                if leading && all_pad {
                    a.leading_pad_steps += 1;
                } else {
                    leading = false;
                }
                if !ended && a.steps > delay {
                    groups += 1;
                    if slots.first() == Some(&SpeechSlot::Eos) {
                        ended = true;
                        a.speech_slots = k * (groups - 1) + 1;
                    }
                }
            }
            EventKind::ChunkEnd { .. } => {
                if let Some(a) = audits.last_mut() {
                    if !ended {
                        a.speech_slots = groups * k;
                    }
                    a.expected_steps = schedule_steps(a.text_len, a.speech_slots, delay, k);
                }
            }
            _ => {}
        }
    }
    audits
}
