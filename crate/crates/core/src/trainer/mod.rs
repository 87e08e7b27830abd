//! Two-stage training and length-bucketed batching.
//!
//! Pre-training freezes the base group and updates only the adapter group.
//! Post-training updates both, the adapter at five times the base learning
//! rate. Every optimizer step consumes one token-budgeted batch of
//! teacher-forced sequences laid out exactly as the decoder runs them.

mod batching;
mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{teacher_forced, ChunkPolicy, DecodeError, ForcedSequence};
use crate::numcore::{accumulate, params, params_mut, zeros_like};
use crate::speechlm::{GroupedParams, ParamGroup, SpeechLm, SpeechLmError};
use crate::synthdata::{stream_codes, OracleSpec, SynthSample};
use crate::vocab::ExtendedVocab;

pub use batching::{
    naive_batches, plan_batches, throughput_report, waste, Batch, BatchPlan, ThroughputReport, DEFAULT_SPREAD,
    DEFAULT_TOKEN_BUDGET,
};
pub use optim::{Optimizer, OptimizerKind};

/// Adapter-to-base learning-rate ratio used by post-training.
pub const ADAPTER_LR_RATIO: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setting: {0}")]
    Config(String),
    #[error("{} sample(s) exceed the token budget {budget} or are empty: {offenders:?}", offenders.len())]
    OverBudget { budget: usize, offenders: Vec<(usize, usize)> },
    #[error("non-finite loss at step {step}, batch {batch}")]
    NonFinite { step: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] SpeechLmError),
    #[error(transparent)]
    Layout(#[from] DecodeError),
    #[error("no training sequences")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Posttrain,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub base_lr: f64,
    pub adapter_lr: f64,
    pub frozen: Vec<ParamGroup>,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub token_budget: usize,
    pub spread: f64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Linear warmup length; the rate then follows a half cosine down to
    /// `final_lr_fraction` of its peak when that is below 1.
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
}

impl StageConfig {
    /// Base frozen; only the adapter learns, at `adapter_lr`.
    pub fn pretrain(adapter_lr: f64, steps: usize) -> Self {
        Self {
            stage: Stage::Pretrain,
            base_lr: 0.0,
            adapter_lr,
            frozen: vec![ParamGroup::Base],
            steps,
            optimizer: OptimizerKind::default(),
            token_budget: DEFAULT_TOKEN_BUDGET,
            spread: DEFAULT_SPREAD,
            clip_norm: None,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
        }
    }

    /// Both groups learn; the adapter at five times `base_lr`.
    pub fn posttrain(base_lr: f64, steps: usize) -> Self {
        Self {
            stage: Stage::Posttrain,
            base_lr,
            adapter_lr: ADAPTER_LR_RATIO * base_lr,
            frozen: Vec::new(),
            ..Self::pretrain(0.0, steps)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stage == Stage::Pretrain && !self.frozen.contains(&ParamGroup::Base) {
            return Err(TrainError::Config("pretrain must freeze the base group".into()));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("adapter_lr", self.adapter_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} {lr} must be finite and non-negative")));
            }
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(TrainError::Config(format!("final_lr_fraction {} must be in (0, 1]", self.final_lr_fraction)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.final_lr_fraction >= 1.0 || self.steps <= self.warmup_steps {
            return 1.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos
    }

    /// Learning rate of `group` at `step` (0-based), or `None` when frozen.
    pub fn lr(&self, group: ParamGroup, step: usize) -> Option<f64> {
        if self.frozen.contains(&group) {
            return None;
        }
        let peak = match group {
            ParamGroup::Base => self.base_lr,
            ParamGroup::Adapter => self.adapter_lr,
        };
        Some(peak * self.schedule(step))
    }
}

/// One optimizer step of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr_base: f64,
    pub lr_adapter: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,loss,lr_base,lr_adapter")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.step, r.loss, r.lr_base, r.lr_adapter)?;
    }
    out.flush()
}

/// Applies one optimizer step to any grouped parameter set.
pub fn apply_update<P: GroupedParams>(
    model: &mut P,
    grads: &P,
    optimizer: &mut Optimizer,
    stage: &StageConfig,
    step: usize,
) {
    let groups = model.groups();
    let grads = params(grads);
    optimizer.step(params_mut(model), &grads, &groups, |g| stage.lr(g, step));
}

/// Teacher-forced sequences for `samples`, chunked with `policy`.
pub fn prepare_sequences(
    samples: &[SynthSample],
    spec: &OracleSpec,
    vocab: &ExtendedVocab,
    policy: ChunkPolicy,
    delay: usize,
) -> Result<Vec<ForcedSequence>, TrainError> {
    if spec.n_text != vocab.n_text() || spec.n_speech != vocab.n_speech() {
        return Err(TrainError::Config(format!(
            "dataset has {} text / {} speech tokens, model vocab has {} / {}",
            spec.n_text,
            spec.n_speech,
            vocab.n_text(),
            vocab.n_speech()
        )));
    }
    samples
        .iter()
        .filter(|s| !s.text.is_empty())
        .map(|s| Ok(teacher_forced(&s.text, &stream_codes(&s.speech), spec.rate_ratio, vocab, policy, delay)?))
        .collect()
}

/// Loss over `data` weighted by target count.
pub fn mean_loss(model: &SpeechLm, data: &[ForcedSequence]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in data {
        let n = seq.target_count();
        sum += model.loss(&seq.steps, &seq.positions, &seq.targets)? * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub losses: Vec<LossRecord>,
    pub epochs: usize,
}

fn global_norm(grads: &SpeechLm) -> f64 {
    params(grads).iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs `stage.steps` optimizer steps over `data`, re-planning batches every epoch.
pub fn train_stage(
    model: &mut SpeechLm,
    data: &[ForcedSequence],
    stage: &StageConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainReport, TrainError> {
    stage.validate()?;
    let mut report = TrainReport { stage: stage.stage, losses: Vec::with_capacity(stage.steps), epochs: 0 };
    if stage.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let lengths: Vec<usize> = data.iter().map(ForcedSequence::len).collect();
    let mut optimizer = Optimizer::new(stage.optimizer, &params(model));
    let mut step = 0;
    'epochs: loop {
        let epoch_seed = seed.wrapping_add((report.epochs as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let plan = plan_batches(&lengths, stage.token_budget, stage.spread, epoch_seed)?;
        report.epochs += 1;
        for (batch_index, batch) in plan.batches.iter().enumerate() {
            if step == stage.steps {
                break 'epochs;
            }
            let mut grads = zeros_like(model);
            let mut sum = 0.0;
            let mut count = 0usize;
            for &i in &batch.ids {
                let seq = &data[i];
                let (s, n, g) = model.loss_sum_and_grad(&seq.steps, &seq.positions, &seq.targets)?;
                sum += s;
                count += n;
                accumulate(&mut grads, &g, 1.0);
            }
            let loss = if count == 0 { 0.0 } else { sum / count as f64 };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step: step + 1, batch: batch_index });
            }
            let mut scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
            if let Some(clip) = stage.clip_norm {
                let norm = global_norm(&grads) * scale;
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            params_mut(&mut grads).into_iter().for_each(|m| m.scale(scale));
            apply_update(model, &grads, &mut optimizer, stage, step);
            let record = LossRecord {
                step: step + 1,
                loss,
                lr_base: stage.lr(ParamGroup::Base, step).unwrap_or(0.0),
                lr_adapter: stage.lr(ParamGroup::Adapter, step).unwrap_or(0.0),
            };
            on_step(&record);
            report.losses.push(record);
            step += 1;
        }
    }
    Ok(report)
}
