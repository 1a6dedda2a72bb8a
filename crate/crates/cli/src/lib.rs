//! The `mitr` command line.
//!
//! Every command writes its outputs plus a `run_manifest.json` into one
//! output directory. Exit codes: 0 on success, 1 on runtime failure, 2 on a
//! configuration or usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mitr_core::exec::{set_exec_mode, ExecMode};
use mitr_core::Error;

pub mod ablate;
pub mod commands;
pub mod report;

pub use ablate::{ablate_arms, Arm};
pub use report::RunManifest;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MITR_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "mitr", version, about = "Missing-modality sentiment regression toolkit")]
pub struct Cli {
    /// Run every data-parallel section on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature archive from a spec file.
    Synth(SynthArgs),
    /// Train a teacher (complete setting) or a student (incomplete setting).
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of missing rates.
    Sweep(SweepArgs),
    /// Train and evaluate the arms of one ablation axis.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Synthetic spec, TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run config, TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds, comma separated; overrides `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub setting: Option<SettingArg>,
    /// Teacher checkpoint directory, or a train output root with `seed-<s>` subdirectories.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Run config naming the archive.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Missing rates, comma separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    /// Mask seeds, comma separated; overrides `sweep.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Evaluation rates for the incomplete rows; defaults to `sweep.rates`.
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    #[arg(long, value_enum)]
    pub setting: Option<SettingArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Seeds of the random points, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = mitr_core::gradcheck::EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Complete,
    Incomplete,
}

impl From<SettingArg> for mitr_core::losses::Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Complete => mitr_core::losses::Setting::Complete,
            SettingArg::Incomplete => mitr_core::losses::Setting::Incomplete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    NBlocks,
    LossCombo,
    NoTf,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::NBlocks => "n_blocks",
            Axis::LossCombo => "loss_combo",
            Axis::NoTf => "no_tf",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Check(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_) | Error::Spec(_)) => 2,
            _ => 1,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.sequential {
        set_exec_mode(ExecMode::Sequential);
    }
    match &cli.command {
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Ablate(a) => ablate::cmd_ablate(a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a),
    }
}
