//! Versioned little-endian checkpoint.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a UTF-8
//! TOML header (model config, vocabulary, tensor table, provenance), then
//! every tensor as raw `f64` values in the order the header lists them.

use std::io::{Read, Write};
use std::path::Path;

use chunkspeech::infomine::FusionParams;
use chunkspeech::numcore::rng::Rng;
use chunkspeech::numcore::{param_names, params, params_mut};
use chunkspeech::speechlm::{GroupedParams, ParamGroup, SpeechLm, SpeechLmConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorCode};

pub const MAGIC: &[u8; 8] = b"CHSPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// One completed training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub steps: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub adapter_lr: f64,
    pub optimizer: String,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub init_seed: u64,
    pub data_seed: u64,
    /// Optimizer steps over all stages, including earlier runs that were resumed.
    pub total_steps: usize,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    fusion_dim: Option<usize>,
    fusion_scaled: bool,
    model: SpeechLmConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SpeechLm,
    pub fusion: Option<FusionParams>,
    pub provenance: Provenance,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Base => "base",
        ParamGroup::Adapter => "adapter",
    }
}

fn corrupt(message: impl Into<String>) -> CliError {
    CliError::new(ErrorCode::Checkpoint, message)
}

impl Checkpoint {
    fn tensor_table(&self) -> Vec<TensorEntry> {
        let mut out: Vec<TensorEntry> = param_names(&self.model)
            .into_iter()
            .zip(params(&self.model))
            .zip(self.model.groups())
            .map(|((name, m), g)| TensorEntry { name, group: group_name(g).into(), rows: m.rows(), cols: m.cols() })
            .collect();
        if let Some(f) = &self.fusion {
            out.extend(param_names(f).into_iter().zip(params(f)).map(|(name, m)| TensorEntry {
                name: format!("fusion.{name}"),
                group: "fusion".into(),
                rows: m.rows(),
                cols: m.cols(),
            }));
        }
        out
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), CliError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            fusion_dim: self.fusion.as_ref().map(FusionParams::dim),
            fusion_scaled: self.fusion.as_ref().is_some_and(|f| f.scaled),
            model: self.model.config().clone(),
            provenance: self.provenance.clone(),
            tensors: self.tensor_table(),
        };
        let text = toml::to_string(&header).map_err(|e| corrupt(format!("header: {e}")))?;
        let io = |e| CliError::io("checkpoint", e);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(text.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(text.as_bytes()).map_err(io)?;
        let mut tensors = params(&self.model);
        if let Some(f) = &self.fusion {
            tensors.extend(params(f));
        }
        let mut buf = Vec::new();
        for m in tensors {
            buf.clear();
            buf.extend(m.data().iter().flat_map(|v| v.to_le_bytes()));
            out.write_all(&buf).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, CliError> {
        let mut fixed = [0u8; 20];
        input.read_exact(&mut fixed).map_err(|_| corrupt("file too short for a checkpoint header"))?;
        if &fixed[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CliError::new(
                ErrorCode::CheckpointVersion,
                format!("checkpoint format {version}, this build reads {FORMAT_VERSION}"),
            ));
        }
        let len = u64::from_le_bytes(fixed[12..20].try_into().expect("8 bytes"));
        let mut text = vec![0u8; usize::try_from(len).map_err(|_| corrupt("header length"))?];
        input.read_exact(&mut text).map_err(|_| corrupt("truncated header"))?;
        let text = String::from_utf8(text).map_err(|_| corrupt("header is not UTF-8"))?;
        let header: Header = toml::from_str(&text).map_err(|e| corrupt(format!("header: {}", e.message())))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let mut model = SpeechLm::new(header.model.clone(), 0).map_err(|e| corrupt(e.to_string()))?;
        let mut fusion = header.fusion_dim.map(|d| {
            let mut f = FusionParams::new(d, &mut Rng::seed(0));
            f.scaled = header.fusion_scaled;
            f
        });
        let mut ckpt = Checkpoint { model: model.clone(), fusion: fusion.clone(), provenance: header.provenance.clone() };
        if ckpt.tensor_table() != header.tensors {
            return Err(corrupt("tensor table does not match the model configuration"));
        }
        let mut targets = params_mut(&mut model);
        if let Some(f) = fusion.as_mut() {
            targets.extend(params_mut(f));
        }
        let mut buf = Vec::new();
        for m in targets {
            buf.resize(m.data().len() * 8, 0);
            input.read_exact(&mut buf).map_err(|_| corrupt("truncated parameter data"))?;
            for (v, bytes) in m.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(bytes.try_into().expect("8 bytes"));
            }
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| CliError::io("checkpoint", e))? != 0 {
            return Err(corrupt("trailing bytes after parameter data"));
        }
        ckpt.model = model;
        ckpt.fusion = fusion;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path.display(), e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Human-readable summary for `inspect-ckpt`.
    pub fn describe(&self) -> String {
        let c = self.model.config();
        let v = c.vocab;
        let mut s = format!(
            "format {FORMAT_VERSION}\nmodel d_model={} base_layers={} adapter_layers={} heads={} max_seq_len={} tie_heads={} recency_bias={}\n",
            c.d_model, c.n_layers_base, c.n_layers_adapter, c.n_heads, c.max_seq_len, c.tie_heads, c.recency_bias
        );
        s += &format!("vocab text={} speech={} k={} size={}\n", v.n_text(), v.n_speech(), v.k(), v.size());
        let mut counts = [("base", 0usize), ("adapter", 0), ("fusion", 0)];
        for t in self.tensor_table() {
            let slot = counts.iter_mut().find(|(g, _)| *g == t.group).expect("known group");
            slot.1 += t.rows * t.cols;
        }
        for (g, n) in counts {
            s += &format!("params {g}={n}\n");
        }
        let p = &self.provenance;
        s += &format!("provenance init_seed={} data_seed={} total_steps={}\n", p.init_seed, p.data_seed, p.total_steps);
        for r in &p.stages {
            s += &format!(
                "stage {} steps={} seed={} base_lr={} adapter_lr={} optimizer={} final_loss={:.6}\n",
                r.stage, r.steps, r.seed, r.base_lr, r.adapter_lr, r.optimizer, r.final_loss
            );
        }
        s
    }
}
