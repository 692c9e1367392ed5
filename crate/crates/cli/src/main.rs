//! `piaug`: data generation, training, evaluation, navigation and
//! benchmarking from one config file.

mod commands;
mod layout;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use piaug_core::train::TrainMode;

/// Exit codes: 0 success, 2 usage, 3 data error, 4 divergence.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] piaug_core::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use piaug_core::Error as E;
        match self {
            Failure::Usage(_) | Failure::Core(E::Config(_)) => 2,
            Failure::Diverged(_) | Failure::Core(E::Divergence { .. }) => 4,
            Failure::Core(_) => 3,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "piaug", version, about = "Physics-informed augmentation for learned off-road vehicle dynamics")]
struct Cli {
    /// Cap on worker threads for every parallel stage.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output root, overriding the config file.
    #[arg(long, env = "PIAUG_OUT")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect the low-speed training set and the balanced evaluation set.
    GenData(Common),
    /// Train one model variant on the training set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: TrainMode,
        /// Continue from the checkpoint of an earlier, interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete (resume later).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Prediction errors of the bicycle model and trained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate; every trained variant when omitted.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Closed-loop figure-eight runs with MPPI.
    Navigate {
        #[command(flatten)]
        common: Common,
        /// `kbm`, a trained variant name, or a checkpoint path.
        #[arg(long, default_value = "kbm")]
        model: String,
        /// Goal radii in metres.
        #[arg(long = "radius", default_values_t = [4.0])]
        radii: Vec<f64>,
        /// Trials per radius (config value otherwise).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rollout timing: per-sample, shared-encoding and bicycle model.
    Bench {
        #[command(flatten)]
        common: Common,
        /// A trained variant name or a checkpoint path.
        #[arg(long, default_value = "piaug")]
        model: String,
        /// Comma-separated sample counts (config value otherwise).
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
        /// Timed repetitions per count.
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Long-format CSVs of every report found under the output root.
    PlotData(Common),
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse::<TrainMode>().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, mode, resume, stop_after } => commands::train(&common, mode, resume, stop_after),
        Command::Eval { common, checkpoints } => commands::eval(&common, &checkpoints),
        Command::Navigate { common, model, radii, trials } => commands::navigate(&common, &model, &radii, trials),
        Command::Bench { common, model, samples, repetitions } => commands::bench(&common, &model, samples, repetitions),
        Command::PlotData(c) => plot::plot_data(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
