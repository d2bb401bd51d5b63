//! `rmbil`: demonstrations, the three training phases, CVAE training,
//! rollouts, evaluation sweeps and figure tables, one subcommand each.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rmbil", version, about = "Robust model-based imitation learning pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Directory holding every input and output of the pipeline.
    #[arg(long)]
    pub out: PathBuf,
    /// Hyperparameter preset: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Clone, Debug)]
pub struct Training {
    #[command(flatten)]
    pub common: Common,
    /// Train on the first k demonstrations only.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the expert and write the demonstration dataset.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "p1")]
        plant: String,
        /// Number of trajectories.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Samples per trajectory.
        #[arg(long, default_value_t = 1000)]
        t: usize,
    },
    /// Phase 1: fit the affine dynamics model.
    TrainDynamics(Training),
    /// Phase 2: fit the tracking controller through the frozen model.
    TrainController(Training),
    /// Phase 3: noise-injected refinement of the controller.
    RefineRobust(Training),
    /// Fit the conditional VAE reference generator.
    TrainCvae(Training),
    /// Run one episode and write its trace.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// learned, robust, model-ndi, oracle, expert, random or bc.
        #[arg(long, default_value = "robust")]
        controller: String,
        /// replay or cvae.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        gain: Option<f64>,
        /// none, slope, uneven or param_shift.
        #[arg(long, default_value = "none")]
        disturbance: String,
    },
    /// Score every controller over disturbances and gains.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
        gains: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "none,slope,uneven")]
        disturbances: Vec<String>,
        /// replay or cvae.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Merge evaluation reports into figure tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to merge; defaults to --out.
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
    },
}

/// A failure reported as one `error[kind]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new("io", message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.kind, msg)
    }
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RMBIL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::usage(format!("RMBIL_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::io(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    use commands as c;
    match cli.cmd {
        Cmd::GenDemos { common, plant, n, t } => c::gen_demos(&common, &plant, n, t),
        Cmd::TrainDynamics(a) => c::train_dynamics(&a),
        Cmd::TrainController(a) => c::train_controller(&a),
        Cmd::RefineRobust(a) => c::refine_robust(&a),
        Cmd::TrainCvae(a) => c::train_cvae(&a),
        Cmd::Rollout {
            common,
            controller,
            reference,
            gain,
            disturbance,
        } => c::rollout(&common, &controller, reference.as_deref(), gain, &disturbance),
        Cmd::Evaluate {
            common,
            gains,
            episodes,
            disturbances,
            reference,
        } => c::evaluate(&common, &gains, episodes, &disturbances, reference.as_deref()),
        Cmd::Report { common, runs } => c::report(&common, &runs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
