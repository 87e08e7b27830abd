pub mod bench;
pub mod datagen;
pub mod eval;
pub mod generate;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chunkspeech::decoder::{DecodeError, GenerateOutput};
use chunkspeech::synthdata::{read_dataset, Dataset, SynthError};
use clap::Args;

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Checkpoint file.
    pub ckpt: PathBuf,
}

pub fn inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    emit(out, &ckpt.describe())
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io("stdout", e))
}

pub(crate) fn data_error(path: &Path, err: SynthError) -> CliError {
    match err {
        SynthError::Io(e) => CliError::io(path.display(), e),
        other => CliError::new(ErrorCode::Data, format!("{}: {other}", path.display())),
    }
}

pub(crate) fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path.display(), e))?;
    read_dataset(BufReader::new(file)).map_err(|e| data_error(path, e))
}

/// Creates `path` and any missing parent directories.
pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path.display(), e))
}

/// The decoded output, keeping the partial result of a truncated run.
pub(crate) fn decoded(result: Result<GenerateOutput, DecodeError>) -> Result<(GenerateOutput, bool), CliError> {
    match result {
        Ok(o) => Ok((o, false)),
        Err(DecodeError::Partial { output, .. }) => Ok((*output, true)),
        Err(e) => Err(CliError::new(ErrorCode::Decode, e.to_string())),
    }
}
