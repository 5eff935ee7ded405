//! `agc` command-line driver: argument parsing, config resolution and stage
//! dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

pub mod config;
pub mod stages;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot parse config: {0}")]
    ConfigParse(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigParse(_) | CliError::InvalidConfig(_) => 1,
            CliError::Stage(_) => 2,
        }
    }
}

macro_rules! stage_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Stage(e.to_string())
            }
        })*
    };
}

stage_error!(
    std::io::Error,
    serde_json::Error,
    agc_core::phantom::PhantomError,
    agc_core::collection::CollectionError,
    agc_core::workcell::WorkcellError,
    agc_experiment::ExperimentError,
    agc_nn::NnError
);

#[derive(Debug, Parser)]
#[command(name = "agc", about = "Simulated tactile imaging and tumor classification pipeline", disable_version_flag = true)]
struct Cli {
    /// Print build metadata and exit.
    #[arg(long)]
    version: bool,
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run config; flags below override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random-search configurations per architecture.
    #[arg(long, global = true, value_name = "N")]
    n_configs: Option<usize>,
    /// Capture and classifier input size (square).
    #[arg(long, global = true, value_name = "PX")]
    resolution: Option<usize>,
    /// Views per phantom.
    #[arg(long, global = true, value_name = "N")]
    views: Option<usize>,
    /// Architectures, comma separated.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_arch)]
    arch: Option<Vec<agc_nn::Arch>>,
    /// Worker threads for collection, search and cross-validation.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

fn parse_arch(s: &str) -> Result<agc_nn::Arch, String> {
    s.parse().map_err(|e: agc_nn::NnError| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the phantom bank.
    GenPhantoms,
    /// Run a synthetic camera and hand-eye calibration session.
    Calibrate,
    /// Capture tactile images of every phantom.
    Collect,
    /// Tumor-level train/test split of the collected manifest.
    Split,
    /// Random hyperparameter search per architecture.
    Search,
    /// Stratified k-fold cross-validation of the chosen configuration.
    Cv,
    /// Train final models on the training split.
    Train,
    /// Score final models on the test split.
    Evaluate,
    /// Summarize evaluation reports.
    Report,
    /// Run gen-phantoms through evaluate, then report.
    All,
}

pub fn version_string() -> String {
    format!(
        "agc {} (target {}, profile {})",
        env!("CARGO_PKG_VERSION"),
        env!("AGC_BUILD_TARGET"),
        env!("AGC_BUILD_PROFILE")
    )
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            n_configs: self.n_configs,
            resolution: self.resolution,
            views: self.views,
            archs: self.arch.clone(),
            jobs: self.jobs,
        }
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.resolve(&self.overrides())
    }
}

/// Runs one stage with an already resolved config, echoing the config to
/// `output_dir/resolved_config.json` first.
pub fn run_stage(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("resolved_config.json"), cfg.to_json())?;
    match command {
        Command::GenPhantoms => stages::gen_phantoms(cfg).map(drop),
        Command::Calibrate => stages::calibrate(cfg).map(drop),
        Command::Collect => stages::collect(cfg).map(drop),
        Command::Split => stages::split(cfg).map(drop),
        Command::Search => stages::search(cfg).map(drop),
        Command::Cv => stages::cv(cfg).map(drop),
        Command::Train => stages::train(cfg).map(drop),
        Command::Evaluate => stages::evaluate(cfg).map(drop),
        Command::Report => stages::report(cfg).map(drop),
        Command::All => stages::all(cfg).map(drop),
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp => 0,
                _ => 1,
            };
        }
    };
    if cli.version {
        println!("{}", version_string());
        return 0;
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        return 1;
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let result = cli.common.resolve().and_then(|cfg| run_stage(command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
