use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chunkspeech::decoder::{generate, Clock, LogicalClock, MonotonicClock, StreamEvent};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{create, decoded, emit, load_dataset};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_split, split_name, RunConfig};
use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// `train`, `heldout_short` or `heldout_long`; repeat for several.
    #[arg(long = "split", default_values_t = ["heldout_short".to_string()])]
    pub splits: Vec<String>,
    /// Decode at most this many samples per split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// One JSON record per decoded sample.
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited event log.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

/// One line of the generation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub sample: usize,
    pub split: String,
    pub text: Vec<u32>,
    pub codes: Vec<u32>,
    pub steps: usize,
    /// A chunk hit its step budget; `codes` holds what was decoded until then.
    pub truncated: bool,
}

#[derive(Serialize)]
struct SampleEvent<'a> {
    split: &'a str,
    sample: usize,
    #[serde(flatten)]
    event: &'a StreamEvent,
}

pub fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::new(ErrorCode::Data, format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn run(config: &RunConfig, args: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let options = config.decode_options()?;
    let splits = args.splits.iter().map(|s| parse_split(s)).collect::<Result<Vec<_>, _>>()?;

    let mut records_file = create(&args.out)?;
    let mut events_file = args.events.as_deref().map(create).transpose()?;
    let (mut samples, mut steps, mut truncated) = (0usize, 0usize, 0usize);
    for split in splits {
        let name = split_name(split);
        let pool = dataset.split(split);
        for (i, sample) in pool.iter().take(args.limit.unwrap_or(pool.len())).enumerate() {
            let clock: Arc<dyn Clock> =
                if config.logical_clock() { Arc::new(LogicalClock::default()) } else { Arc::new(MonotonicClock::default()) };
            let (output, cut) = decoded(generate(&sample.text, &ckpt.model, options, clock))?;
            let record = GeneratedRecord {
                sample: i,
                split: name.into(),
                text: sample.text.clone(),
                codes: output.codes,
                steps: output.steps,
                truncated: cut,
            };
            let io = |e| CliError::io(args.out.display(), e);
            serde_json::to_writer(&mut records_file, &record).map_err(|e| io(e.into()))?;
            records_file.write_all(b"\n").map_err(io)?;
            if let (Some(file), Some(path)) = (events_file.as_mut(), args.events.as_ref()) {
                for event in &output.events {
                    let line = SampleEvent { split: name, sample: i, event };
                    serde_json::to_writer(&mut *file, &line).map_err(|e| CliError::io(path.display(), e.into()))?;
                    file.write_all(b"\n").map_err(|e| CliError::io(path.display(), e))?;
                }
            }
            samples += 1;
            steps += record.steps;
            truncated += usize::from(cut);
        }
    }
    records_file.flush().map_err(|e| CliError::io(args.out.display(), e))?;
    if let (Some(mut file), Some(path)) = (events_file, args.events.as_ref()) {
        file.flush().map_err(|e| CliError::io(path.display(), e))?;
    }
    emit(out, &format!("decoded {samples} samples in {steps} steps ({truncated} truncated) to {}\n", args.out.display()))
}
