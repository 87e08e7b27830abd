use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use chunkspeech::decoder::{generate, ChunkPolicy, DecodeMode, MonotonicClock};
use chunkspeech::evalkit::{rtf, TimingRecord};
use chunkspeech::speechlm::SpeechLm;
use chunkspeech::synthdata::SynthSample;
use clap::Args;
use serde::Serialize;

use super::eval::score;
use super::generate::GeneratedRecord;
use super::{create, decoded, emit, load_dataset};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_split, RunConfig};
use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Dataset written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoints, at most one per k. Any k in `bench.ks` without one
    /// runs a freshly initialized model of the same shape.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Results as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One cell of the k × chunking sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub chunking: bool,
    /// `trained` or `init`.
    pub weights: String,
    pub samples: usize,
    pub steps: usize,
    pub codes: usize,
    pub wall_seconds: f64,
    pub rtf: f64,
    /// Wall-clock time of the smallest k with the same chunking over this row's.
    pub speedup: f64,
    pub wer: f64,
    pub truncated: usize,
}

pub struct BenchModel {
    pub model: SpeechLm,
    pub weights: String,
}

fn bench_error(e: impl std::fmt::Display) -> CliError {
    CliError::new(ErrorCode::Decode, e.to_string())
}

/// Runs every model over `samples` with chunking on and off, one trial at a time.
pub fn measure(config: &RunConfig, models: &[BenchModel], samples: &[SynthSample]) -> Result<Vec<BenchRow>, CliError> {
    let spec = config.oracle_spec()?;
    let base = DecodeMode::Greedy;
    let mut rows = Vec::new();
    for m in models {
        let k = m.model.config().vocab.k();
        for chunking in [true, false] {
            let mut options = config.decode_options()?;
            options.mode = base;
            options.length = config.bench_length()?;
            if !chunking {
                options.policy = ChunkPolicy::Whole;
            }
            let mut best = f64::INFINITY;
            let mut records = Vec::new();
            for _ in 0..config.bench.repeats {
                records.clear();
                let mut wall = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let (output, cut) = decoded(generate(&s.text, &m.model, options, Arc::new(MonotonicClock::default())))?;
                    wall += output.elapsed_ns as f64 * 1e-9;
                    records.push(GeneratedRecord {
                        sample: i,
                        split: config.bench.split.clone(),
                        text: s.text.clone(),
                        codes: output.codes,
                        steps: output.steps,
                        truncated: cut,
                    });
                }
                best = best.min(wall);
            }
            let codes: usize = records.iter().map(|r| r.codes.len()).sum();
            let timing = TimingRecord { wall_seconds: best, tokens: codes, token_rate_hz: spec.token_rate_hz };
            rows.push(BenchRow {
                k,
                chunking,
                weights: m.weights.clone(),
                samples: records.len(),
                steps: records.iter().map(|r| r.steps).sum(),
                codes,
                wall_seconds: best,
                rtf: rtf(&timing).unwrap_or(f64::NAN),
                speedup: 1.0,
                wer: score(&records, &spec, config.eval.window_seconds, None)?.overall,
                truncated: records.iter().filter(|r| r.truncated).count(),
            });
        }
    }
    for chunking in [true, false] {
        let reference = rows.iter().filter(|r| r.chunking == chunking).min_by_key(|r| r.k).map(|r| r.wall_seconds);
        if let Some(reference) = reference {
            rows.iter_mut().filter(|r| r.chunking == chunking).for_each(|r| r.speedup = reference / r.wall_seconds);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "k,chunking,weights,samples,steps,codes,wall_seconds,rtf,speedup,wer,truncated")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            if r.chunking { "on" } else { "off" },
            r.weights,
            r.samples,
            r.steps,
            r.codes,
            r.wall_seconds,
            r.rtf,
            r.speedup,
            r.wer,
            r.truncated
        )?;
    }
    out.flush()
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>3}  {:>8}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}  {:>7}  {:>7}\n",
        "k", "chunking", "weights", "steps", "codes", "wall (s)", "RTF", "speedup", "WER"
    );
    for r in rows {
        s += &format!(
            "{:>3}  {:>8}  {:>7}  {:>7}  {:>7}  {:>9.3}  {:>7.4}  {:>7.2}  {:>7.4}\n",
            r.k,
            if r.chunking { "on" } else { "off" },
            r.weights,
            r.steps,
            r.codes,
            r.wall_seconds,
            r.rtf,
            r.speedup,
            r.wer
        );
    }
    s
}

pub fn run(config: &RunConfig, args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let split = parse_split(&config.bench.split)?;
    let pool = dataset.split(split);
    let samples = &pool[..config.bench.samples.min(pool.len())];
    if samples.is_empty() {
        return Err(CliError::new(ErrorCode::Data, format!("split {} has no samples", config.bench.split)));
    }
    let mut trained: BTreeMap<usize, SpeechLm> = BTreeMap::new();
    for path in &args.ckpt {
        let ckpt = Checkpoint::load(path)?;
        let k = ckpt.model.config().vocab.k();
        if trained.insert(k, ckpt.model).is_some() {
            return Err(CliError::new(ErrorCode::Usage, format!("two checkpoints with k={k}")));
        }
    }
    let shape = match trained.values().next() {
        Some(m) => m.config().clone(),
        None => config.model_config()?,
    };
    let mut models = Vec::new();
    for &k in &config.bench.ks {
        models.push(match trained.remove(&k) {
            Some(model) => BenchModel { model, weights: "trained".into() },
            None => {
                let cfg = shape.with_k(k).map_err(bench_error)?;
                BenchModel { model: SpeechLm::new(cfg, config.train.init_seed).map_err(bench_error)?, weights: "init".into() }
            }
        });
    }
    let rows = measure(config, &models, samples)?;
    if let Some(path) = &args.out {
        write_csv(&rows, create(path)?).map_err(|e| CliError::io(path.display(), e))?;
    }
    emit(out, &table(&rows))
}
