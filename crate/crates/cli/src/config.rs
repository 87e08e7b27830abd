//! Run configuration: a TOML file of flat `key = value` pairs grouped in
//! sections, with `section.key=value` overrides applied on top.

use std::path::Path;

use chunkspeech::decoder::{ChunkPolicy, DecodeMode, DecodeOptions, LengthControl};
use chunkspeech::speechlm::{PadEmbedding, SpeechLmConfig};
use chunkspeech::synthdata::{DatasetConfig, LengthDist, OracleSpec, Split};
use chunkspeech::trainer::{OptimizerKind, Stage, StageConfig};
use chunkspeech::vocab::ExtendedVocab;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub decode: DecodeSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_text: usize,
    pub n_speech: usize,
    pub rate_ratio: usize,
    pub a: u64,
    pub b: u64,
    pub token_rate_hz: f64,
    /// Sentence delimiter token; negative disables sentence-local positions.
    pub delimiter: i64,
    pub train: usize,
    pub heldout_short: usize,
    pub heldout_long: usize,
    pub short_min: usize,
    pub short_max: usize,
    pub long_min: usize,
    pub long_max: usize,
    pub sentence_min: usize,
    pub sentence_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers_base: usize,
    pub n_layers_adapter: usize,
    pub n_heads: usize,
    pub k: usize,
    pub max_seq_len: usize,
    pub tie_heads: bool,
    pub recency_bias: bool,
    /// `learned` or `zero`.
    pub pad_embedding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub delay: usize,
    /// `sentence`, `fixed` or `whole`.
    pub policy: String,
    pub max_chunk_tokens: usize,
    /// `greedy` or `sampled`.
    pub mode: String,
    pub temperature: f64,
    /// `free` stops at the end marker; `oracle` emits exactly rate·len codes.
    pub length: String,
    /// `monotonic` or `logical` event timestamps.
    pub clock: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub init_seed: u64,
    /// Seeds batch shuffling; each stage run offsets it by the number of earlier stages.
    pub shuffle_seed: u64,
    /// Stages run in order: `pretrain`, `posttrain`.
    pub stages: Vec<String>,
    pub pretrain_steps: usize,
    /// Adapter learning rate while the base is frozen.
    pub pretrain_lr: f64,
    pub posttrain_steps: usize,
    /// Base learning rate; the adapter gets five times this.
    pub base_lr: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub momentum: f64,
    pub token_budget: usize,
    pub spread: f64,
    /// Zero disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    /// Steps of the fusion retrieval demo stored alongside the model; zero skips it.
    pub fusion_demo_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub window_seconds: f64,
    /// Rewrite rules `"a b => c"` for the normalized reference; empty disables it.
    pub normalize: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub ks: Vec<usize>,
    /// `heldout_short`, `heldout_long` or `train`.
    pub split: String,
    pub samples: usize,
    /// Each cell keeps the fastest of this many timed runs.
    pub repeats: usize,
    /// `oracle` fixes the output length across k; `free` stops at the end marker.
    pub length: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            decode: DecodeSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = OracleSpec::default();
        let data = DatasetConfig::default();
        Self {
            n_text: spec.n_text,
            n_speech: spec.n_speech,
            rate_ratio: spec.rate_ratio,
            a: spec.a,
            b: spec.b,
            token_rate_hz: spec.token_rate_hz,
            delimiter: spec.delimiter.map_or(-1, i64::from),
            train: data.train,
            heldout_short: data.heldout_short,
            heldout_long: data.heldout_long,
            short_min: data.short_lengths.min(),
            short_max: data.short_lengths.max(),
            long_min: data.long_lengths.min(),
            long_max: data.long_lengths.max(),
            sentence_min: data.sentence_min,
            sentence_max: data.sentence_max,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = SpeechLmConfig::toy();
        Self {
            d_model: toy.d_model,
            n_layers_base: toy.n_layers_base,
            n_layers_adapter: toy.n_layers_adapter,
            n_heads: toy.n_heads,
            k: toy.vocab.k(),
            max_seq_len: toy.max_seq_len,
            tie_heads: toy.tie_heads,
            recency_bias: toy.recency_bias,
            pad_embedding: "learned".into(),
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            delay: 4,
            policy: "sentence".into(),
            max_chunk_tokens: chunkspeech::decoder::DEFAULT_MAX_CHUNK_TOKENS,
            mode: "greedy".into(),
            temperature: 1.0,
            length: "free".into(),
            clock: "monotonic".into(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            init_seed: 7,
            shuffle_seed: 3,
            stages: vec!["pretrain".into(), "posttrain".into()],
            pretrain_steps: 200,
            pretrain_lr: 2e-3,
            posttrain_steps: 3000,
            base_lr: 2e-3,
            optimizer: "adam".into(),
            momentum: 0.9,
            token_budget: 512,
            spread: 2.0,
            clip_norm: 1.0,
            warmup_steps: 50,
            final_lr_fraction: 0.05,
            fusion_demo_steps: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { window_seconds: 28.0, normalize: Vec::new() }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { ks: vec![1, 2, 4], split: "heldout_short".into(), samples: 8, repeats: 1, length: "oracle".into() }
    }
}

fn config_error(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::new(ErrorCode::Config, format!("field {field}: {reason}"))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new(ErrorCode::Io, format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_error("<file>", e.message()))?
            }
            None => toml::Table::new(),
        };
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| config_error(entry, "expected key=value"))?;
            let key = key.trim();
            let value = parse_value(value.trim());
            match key.split_once('.') {
                Some((section, field)) => {
                    let slot = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                    let toml::Value::Table(t) = slot else { return Err(config_error(section, "not a section")) };
                    t.insert(field.to_string(), value);
                }
                None => {
                    table.insert(key.to_string(), value);
                }
            }
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            config_error("<config>", e.message().replace('\n', " "))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.oracle_spec()?;
        self.dataset_config()?;
        self.model_config()?;
        self.decode_options()?;
        for s in self.stages()? {
            self.stage_config(s)?;
        }
        if self.eval.window_seconds <= 0.0 {
            return Err(config_error("eval.window_seconds", "must be positive"));
        }
        for rule in &self.eval.normalize {
            parse_rule(rule)?;
        }
        if self.bench.ks.is_empty() || self.bench.ks.contains(&0) {
            return Err(config_error("bench.ks", "needs positive lane counts"));
        }
        if self.bench.samples == 0 || self.bench.repeats == 0 {
            return Err(config_error("bench.samples", "samples and repeats must be positive"));
        }
        self.bench_length()?;
        parse_split(&self.bench.split).map_err(|_| config_error("bench.split", format!("unknown split {:?}", self.bench.split)))?;
        Ok(())
    }

    pub fn oracle_spec(&self) -> Result<OracleSpec, CliError> {
        let d = &self.data;
        let spec = OracleSpec {
            n_text: d.n_text,
            n_speech: d.n_speech,
            rate_ratio: d.rate_ratio,
            a: d.a,
            b: d.b,
            token_rate_hz: d.token_rate_hz,
            delimiter: u32::try_from(d.delimiter).ok(),
        };
        spec.validate().map_err(|e| match e {
            chunkspeech::synthdata::SynthError::Config { field, reason } => config_error(&format!("data.{field}"), reason),
            other => config_error("data", other),
        })?;
        Ok(spec)
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, CliError> {
        let d = &self.data;
        let config = DatasetConfig {
            train: d.train,
            heldout_short: d.heldout_short,
            heldout_long: d.heldout_long,
            short_lengths: LengthDist::Uniform { min: d.short_min, max: d.short_max },
            long_lengths: LengthDist::Uniform { min: d.long_min, max: d.long_max },
            sentence_min: d.sentence_min,
            sentence_max: d.sentence_max,
        };
        config.validate().map_err(|e| match e {
            chunkspeech::synthdata::SynthError::Config { field, reason } => {
                let field = match field {
                    "short_lengths" => "short_min",
                    "long_lengths" => "long_min",
                    other => other,
                };
                config_error(&format!("data.{field}"), reason)
            }
            other => config_error("data", other),
        })?;
        Ok(config)
    }

    pub fn model_config(&self) -> Result<SpeechLmConfig, CliError> {
        let m = &self.model;
        let vocab = ExtendedVocab::new(self.data.n_text, self.data.n_speech, m.k).map_err(|e| config_error("model.k", e))?;
        let pad_embedding = match m.pad_embedding.as_str() {
            "learned" => PadEmbedding::Learned,
            "zero" => PadEmbedding::Zero,
            other => return Err(config_error("model.pad_embedding", format!("unknown value {other:?}"))),
        };
        let config = SpeechLmConfig {
            d_model: m.d_model,
            n_layers_base: m.n_layers_base,
            n_layers_adapter: m.n_layers_adapter,
            n_heads: m.n_heads,
            max_seq_len: m.max_seq_len,
            vocab,
            tie_heads: m.tie_heads,
            recency_bias: m.recency_bias,
            pad_embedding,
        };
        config.validate().map_err(|e| config_error("model", e))?;
        Ok(config)
    }

    pub fn chunk_policy(&self) -> Result<ChunkPolicy, CliError> {
        let d = &self.decode;
        let policy = match d.policy.as_str() {
            "sentence" => {
                let delimiter = u32::try_from(self.data.delimiter)
                    .map_err(|_| config_error("decode.policy", "sentence chunking needs data.delimiter"))?;
                ChunkPolicy::Sentence { delimiter, max_tokens: d.max_chunk_tokens }
            }
            "fixed" => ChunkPolicy::FixedCap { max_tokens: d.max_chunk_tokens },
            "whole" => ChunkPolicy::Whole,
            other => return Err(config_error("decode.policy", format!("unknown value {other:?}"))),
        };
        policy.validate().map_err(|e| config_error("decode.max_chunk_tokens", e))?;
        Ok(policy)
    }

    pub fn decode_options(&self) -> Result<DecodeOptions, CliError> {
        let d = &self.decode;
        let mode = match d.mode.as_str() {
            "greedy" => DecodeMode::Greedy,
            "sampled" if d.temperature > 0.0 => DecodeMode::Sampled { seed: self.seed, temperature: d.temperature },
            "sampled" => return Err(config_error("decode.temperature", "must be positive")),
            other => return Err(config_error("decode.mode", format!("unknown value {other:?}"))),
        };
        let length = self.length_control("decode.length", &d.length)?;
        if !matches!(d.clock.as_str(), "monotonic" | "logical") {
            return Err(config_error("decode.clock", format!("unknown value {:?}", d.clock)));
        }
        Ok(DecodeOptions { delay: d.delay, policy: self.chunk_policy()?, mode, length, rate_ratio: self.data.rate_ratio })
    }

    fn length_control(&self, field: &str, value: &str) -> Result<LengthControl, CliError> {
        match value {
            "free" => Ok(LengthControl::Free),
            "oracle" => Ok(LengthControl::Oracle { rate: self.data.rate_ratio }),
            other => Err(config_error(field, format!("unknown value {other:?}"))),
        }
    }

    pub fn bench_length(&self) -> Result<LengthControl, CliError> {
        self.length_control("bench.length", &self.bench.length)
    }

    pub fn logical_clock(&self) -> bool {
        self.decode.clock == "logical"
    }

    pub fn optimizer(&self) -> Result<OptimizerKind, CliError> {
        match self.train.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::adam()),
            "sgd" => Ok(OptimizerKind::Sgd { momentum: self.train.momentum }),
            other => Err(config_error("train.optimizer", format!("unknown value {other:?}"))),
        }
    }

    pub fn stage_config(&self, stage: Stage) -> Result<StageConfig, CliError> {
        let t = &self.train;
        let base = match stage {
            Stage::Pretrain => StageConfig::pretrain(t.pretrain_lr, t.pretrain_steps),
            Stage::Posttrain => StageConfig::posttrain(t.base_lr, t.posttrain_steps),
        };
        let config = StageConfig {
            optimizer: self.optimizer()?,
            token_budget: t.token_budget,
            spread: t.spread,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            warmup_steps: t.warmup_steps,
            final_lr_fraction: t.final_lr_fraction,
            ..base
        };
        config.validate().map_err(|e| config_error("train", e))?;
        Ok(config)
    }

    pub fn stages(&self) -> Result<Vec<Stage>, CliError> {
        self.train.stages.iter().map(|s| parse_stage(s)).collect()
    }

    pub fn normalizer(&self) -> Result<Option<chunkspeech::evalkit::RuleNormalizer>, CliError> {
        if self.eval.normalize.is_empty() {
            return Ok(None);
        }
        let rules = self.eval.normalize.iter().map(|r| parse_rule(r)).collect::<Result<_, _>>()?;
        Ok(Some(chunkspeech::evalkit::RuleNormalizer { rules }))
    }
}

/// Dataset split by its file name: `train`, `heldout_short` or `heldout_long`.
pub fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "heldout_short" => Ok(Split::HeldoutShort),
        "heldout_long" => Ok(Split::HeldoutLong),
        other => Err(CliError::new(ErrorCode::Usage, format!("unknown split {other:?}"))),
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::HeldoutShort => "heldout_short",
        Split::HeldoutLong => "heldout_long",
    }
}

fn parse_stage(s: &str) -> Result<Stage, CliError> {
    match s {
        "pretrain" => Ok(Stage::Pretrain),
        "posttrain" => Ok(Stage::Posttrain),
        other => Err(config_error("train.stages", format!("unknown stage {other:?}"))),
    }
}

fn parse_tokens(s: &str, rule: &str) -> Result<Vec<u32>, CliError> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| config_error("eval.normalize", format!("bad token {t:?} in {rule:?}"))))
        .collect()
}

/// `"3 4 => 7"` rewrites the pair 3 4 to 7; an empty right side deletes.
fn parse_rule(rule: &str) -> Result<(Vec<u32>, Vec<u32>), CliError> {
    let (from, to) = rule.split_once("=>").ok_or_else(|| config_error("eval.normalize", format!("{rule:?} lacks =>")))?;
    let from = parse_tokens(from, rule)?;
    if from.is_empty() {
        return Err(config_error("eval.normalize", format!("{rule:?} has an empty pattern")));
    }
    Ok((from, parse_tokens(to, rule)?))
}
