use std::io::Write;
use std::path::PathBuf;

use chunkspeech::synthdata::{make_dataset, write_dataset};
use clap::Args;

use super::{create, data_error, emit};
use crate::config::RunConfig;
use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Args)]
pub struct DatagenArgs {
    /// Output dataset file; missing directories are created.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(config: &RunConfig, args: &DatagenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = config.oracle_spec()?;
    let data_config = config.dataset_config()?;
    let dataset = make_dataset(&data_config, &spec, config.seed)
        .map_err(|e| CliError::new(ErrorCode::Config, format!("data: {e}")))?;
    let file = create(&args.out)?;
    write_dataset(&dataset, file).map_err(|e| data_error(&args.out, e))?;
    emit(
        out,
        &format!(
            "wrote {} samples (train {}, heldout_short {}, heldout_long {}) to {}\n",
            dataset.len(),
            dataset.train.len(),
            dataset.heldout_short.len(),
            dataset.heldout_long.len(),
            args.out.display()
        ),
    )
}
