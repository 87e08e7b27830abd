use std::io::Write;
use std::path::PathBuf;

use chunkspeech::infomine::{evaluate, train_retrieval, FusionParams, RetrievalTask, SyntheticEncoders};
use chunkspeech::numcore::rng::Rng;
use chunkspeech::speechlm::SpeechLm;
use chunkspeech::trainer::{prepare_sequences, train_stage, LossRecord, OptimizerKind, Stage};
use clap::Args;

use super::{create, emit, load_dataset};
use crate::checkpoint::{Checkpoint, Provenance, StageRecord};
use crate::config::RunConfig;
use crate::error::{CliError, ErrorCode};

const FUSION_DEMO_LR: f64 = 3e-3;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss curve as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a running mean every N steps; 0 is silent.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

fn train_error(e: impl std::fmt::Display) -> CliError {
    CliError::new(ErrorCode::Train, e.to_string())
}

fn optimizer_name(kind: OptimizerKind) -> String {
    match kind {
        OptimizerKind::Sgd { momentum } => format!("sgd(momentum={momentum})"),
        OptimizerKind::Adam { .. } => "adam".into(),
    }
}

pub fn run(config: &RunConfig, args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    if dataset.spec != config.oracle_spec()? {
        return Err(CliError::new(
            ErrorCode::Config,
            format!("{} was generated with a different oracle than the data section describes", args.data.display()),
        ));
    }
    let mut ckpt = match &args.resume {
        Some(path) => Checkpoint::load(path)?,
        None => {
            let model = SpeechLm::new(config.model_config()?, config.train.init_seed).map_err(train_error)?;
            let provenance = Provenance { init_seed: config.train.init_seed, data_seed: dataset.seed, ..Provenance::default() };
            Checkpoint { model, fusion: None, provenance }
        }
    };
    let vocab = ckpt.model.config().vocab;
    let policy = config.chunk_policy()?;
    let sequences =
        prepare_sequences(&dataset.train, &dataset.spec, &vocab, policy, config.decode.delay).map_err(train_error)?;

    let mut curve: Vec<(&'static str, LossRecord)> = Vec::new();
    for stage in config.stages()? {
        let stage_config = config.stage_config(stage)?;
        let seed = config.train.shuffle_seed.wrapping_add(ckpt.provenance.stages.len() as u64);
        let offset = ckpt.provenance.total_steps;
        let (mut window, mut in_window) = (0.0, 0usize);
        let mut records = Vec::new();
        let report = train_stage(&mut ckpt.model, &sequences, &stage_config, seed, |r| {
            let global = LossRecord { step: r.step + offset, ..*r };
            records.push(global);
            window += r.loss;
            in_window += 1;
            if args.log_every > 0 && global.step % args.log_every == 0 {
                let _ = writeln!(out, "{} step {} loss {:.5}", stage.name(), global.step, window / in_window as f64);
                (window, in_window) = (0.0, 0);
            }
        })
        .map_err(train_error)?;
        let steps = report.losses.len();
        ckpt.provenance.total_steps += steps;
        ckpt.provenance.stages.push(StageRecord {
            stage: stage.name().into(),
            steps,
            seed,
            base_lr: if stage == Stage::Pretrain { 0.0 } else { stage_config.base_lr },
            adapter_lr: stage_config.adapter_lr,
            optimizer: optimizer_name(stage_config.optimizer),
            final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        });
        curve.extend(records.into_iter().map(|r| (stage.name(), r)));
    }

    if config.train.fusion_demo_steps > 0 {
        let task = RetrievalTask::default();
        let mut rng = Rng::seed(config.train.init_seed);
        let encoders = SyntheticEncoders::new(task.dim, &mut rng);
        let mut fusion = ckpt.fusion.take().unwrap_or_else(|| FusionParams::new(task.dim, &mut rng));
        let seed = config.train.shuffle_seed.wrapping_add(ckpt.provenance.stages.len() as u64);
        let losses = train_retrieval(&mut fusion, &task, &encoders, config.train.fusion_demo_steps, FUSION_DEMO_LR, seed)
            .map_err(train_error)?;
        let related = evaluate(&fusion, &task, &encoders, true, 100, seed).map_err(train_error)?;
        let unrelated = evaluate(&fusion, &task, &encoders, false, 100, seed).map_err(train_error)?;
        emit(out, &format!("fusion demo: held-out loss {related:.4} with related aux, {unrelated:.4} with unrelated aux\n"))?;
        ckpt.provenance.stages.push(StageRecord {
            stage: "fusion_demo".into(),
            steps: losses.len(),
            seed,
            base_lr: 0.0,
            adapter_lr: FUSION_DEMO_LR,
            optimizer: "adam".into(),
            final_loss: related,
        });
        ckpt.fusion = Some(fusion);
    }

    ckpt.save(&args.out)?;
    if let Some(path) = &args.loss_csv {
        let mut file = create(path)?;
        let io = |e| CliError::io(path.display(), e);
        writeln!(file, "step,stage,loss,lr_base,lr_adapter").map_err(io)?;
        for (stage, r) in &curve {
            writeln!(file, "{},{stage},{},{},{}", r.step, r.loss, r.lr_base, r.lr_adapter).map_err(io)?;
        }
        file.flush().map_err(io)?;
    }
    let mut summary = String::new();
    for r in &ckpt.provenance.stages {
        summary += &format!("{}: {} steps, final loss {:.5}\n", r.stage, r.steps, r.final_loss);
    }
    summary += &format!("checkpoint {} ({} steps total)\n", args.out.display(), ckpt.provenance.total_steps);
    emit(out, &summary)
}
