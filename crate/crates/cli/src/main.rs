mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// An error in how the tool was invoked or configured.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "mckd", version, about = "Multistage collaborative knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tagging task, its splits and a starter config.
    Synth(SynthArgs),
    /// Label the unlabeled pool with the teacher (stage 0 only).
    Pseudolabel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        stage: u32,
    },
    /// Run the multistage schedule.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and print the stage plan.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        until_stage: Option<u32>,
    },
    /// Continue a run from its directory.
    Resume {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        until_stage: Option<u32>,
    },
    /// Score predictions against gold.
    Evaluate(EvaluateArgs),
    /// Scripted analyses.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Single-student baselines.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// Keep this fraction of self-labels (kd-sd only).
        #[arg(long)]
        filter_ratio: Option<f64>,
    },
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    pub tags: usize,
    #[arg(long, default_value_t = 1)]
    pub rule_width: usize,
    /// Teacher noise rate written to the starter config.
    #[arg(long, default_value_t = 0.3)]
    pub noise_rate: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Score every prediction file of a run against its held-out data.
    #[arg(long, conflicts_with_all = ["predictions", "gold"])]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "gold")]
    pub predictions: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value = "slot-jsonl")]
    pub format: String,
    /// Defaults to the format's metric.
    #[arg(long)]
    pub metric: Option<String>,
    /// Report file; defaults to `evaluation.jsonl` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum AnalyzeKind {
    /// Per-epoch fidelity to teacher labels and held-out score.
    Fidelity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Retrain without well-fit clean and noisy examples and test recall.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_clean: usize,
        #[arg(long, default_value_t = 100)]
        n_noisy: usize,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
    },
    /// Teacher vs final student on the halves where the teacher does best and worst.
    Highlow {
        #[arg(long)]
        config: PathBuf,
        /// Student predictions; defaults to the run's final predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Two-stage runs over a grid of partition sizes.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes_a: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes_b: Vec<usize>,
        /// Extra cells as `AxB`, e.g. `2125x2125`.
        #[arg(long, value_delimiter = ',')]
        extra: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    Vanilla,
    KdSd,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use mckd::Error as E;
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<E>() {
        Some(E::Config(_)) => 2,
        Some(E::Backend(_) | E::Protocol(_) | E::TooManyFailures { .. }) => 3,
        Some(E::Validation(_) | E::Load { .. } | E::Io(_) | E::Json(_)) => 4,
        None if e.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pseudolabel { config, stage } => commands::pseudolabel(&config, stage),
        Command::Run {
            config,
            dry_run,
            until_stage,
        } => commands::run(&config, dry_run, until_stage),
        Command::Resume { run, until_stage } => commands::resume(&run, until_stage),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Analyze { kind } => commands::analyze(&kind),
        Command::Baseline {
            config,
            kind,
            filter_ratio,
        } => commands::baseline(&config, kind, filter_ratio),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
