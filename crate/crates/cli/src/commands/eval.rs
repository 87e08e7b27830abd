use std::io::Write;
use std::path::PathBuf;

use chunkspeech::evalkit::{
    aggregate, dual_reference_score, segment_transcribe, EvalSample, Normalizer, OracleTranscriber, Report,
};
use chunkspeech::synthdata::{stream_codes, OracleSpec};
use clap::Args;

use super::generate::{read_generated, GeneratedRecord};
use super::{create, emit, load_dataset};
use crate::config::{parse_split, split_name, RunConfig};
use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Records written by `generate`.
    #[arg(long, required_unless_present = "gold", conflicts_with = "gold")]
    pub generated: Option<PathBuf>,
    /// Score the dataset's own reference codes instead of generated ones.
    #[arg(long, requires = "data")]
    pub gold: bool,
    /// Dataset for `--gold`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Splits scored with `--gold`.
    #[arg(long = "split", default_values_t = ["heldout_short".to_string(), "heldout_long".to_string()])]
    pub splits: Vec<String>,
    /// Per-split report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn eval_error(e: impl std::fmt::Display) -> CliError {
    CliError::new(ErrorCode::Eval, e.to_string())
}

/// Windowed transcription and min-WER per record, aggregated by split.
pub fn score(
    records: &[GeneratedRecord],
    spec: &OracleSpec,
    window_seconds: f64,
    normalizer: Option<&dyn Normalizer>,
) -> Result<Report, CliError> {
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        let mut transcriber = OracleTranscriber::new(spec.clone());
        let hypothesis = segment_transcribe(&r.codes, window_seconds, spec.token_rate_hz, &mut transcriber);
        let sample = EvalSample {
            hypothesis,
            normalized: normalizer.map(|n| n.normalize(&r.text)),
            truth: r.text.clone(),
            category: r.split.clone(),
        };
        let wer = dual_reference_score(&sample)
            .map_err(|e| eval_error(format!("{} sample {}: {e}", r.split, r.sample)))?;
        scores.push((sample.category, wer));
    }
    aggregate(&scores).map_err(eval_error)
}

pub fn run(config: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = config.oracle_spec()?;
    let records = match (&args.generated, &args.data) {
        (Some(path), _) => read_generated(path)?,
        (None, Some(data)) => {
            let dataset = load_dataset(data)?;
            let mut records = Vec::new();
            for s in &args.splits {
                let split = parse_split(s)?;
                records.extend(dataset.split(split).iter().enumerate().map(|(i, sample)| GeneratedRecord {
                    sample: i,
                    split: split_name(split).into(),
                    text: sample.text.clone(),
                    codes: stream_codes(&sample.speech),
                    steps: 0,
                    truncated: false,
                }));
            }
            records
        }
        (None, None) => return Err(CliError::new(ErrorCode::Usage, "eval needs --generated or --gold --data")),
    };
    let normalizer = config.normalizer()?;
    let report = score(&records, &spec, config.eval.window_seconds, normalizer.as_ref().map(|n| n as &dyn Normalizer))?;
    if let Some(path) = &args.out {
        report.write_csv(create(path)?).map_err(|e| CliError::io(path.display(), e))?;
    }
    emit(out, &report.table())?;
    emit(out, "min-WER is unclipped; a sample can score above 1\n")
}
