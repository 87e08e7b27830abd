//! Command-line driver over the synthetic data and model pipeline.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, ErrorCode};

#[derive(Debug, Parser)]
#[command(name = "chunkspeech", version, about = "Chunked parallel speech-token decoding toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set model.k=2`; later values win.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl GlobalArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (header line plus one JSON record per sample).
    Datagen(commands::datagen::DatagenArgs),
    /// Run the configured training stages and write a checkpoint.
    Train(commands::train::TrainArgs),
    /// Decode dataset texts into speech codes with an event log.
    Generate(commands::generate::GenerateArgs),
    /// Time decoding over k and chunking on/off.
    Bench(commands::bench::BenchArgs),
    /// Score generated codes against the reference texts.
    Eval(commands::eval::EvalArgs),
    /// Print a checkpoint summary with its training provenance.
    InspectCkpt(commands::InspectArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = cli.global.load()?;
    match &cli.command {
        Command::Datagen(a) => commands::datagen::run(&config, a, out),
        Command::Train(a) => commands::train::run(&config, a, out),
        Command::Generate(a) => commands::generate::run(&config, a, out),
        Command::Bench(a) => commands::bench::run(&config, a, out),
        Command::Eval(a) => commands::eval::run(&config, a, out),
        Command::InspectCkpt(a) => commands::inspect(a, out),
        Command::ShowConfig => commands::emit(out, &config.to_toml()),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| usage_error(&e))?;
    execute(&cli, out)
}

/// First line of a clap error as an `E_USAGE` error.
pub fn usage_error(e: &clap::Error) -> CliError {
    let text = e.to_string();
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    CliError::new(ErrorCode::Usage, first.trim_start_matches("error: "))
}
