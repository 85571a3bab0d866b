mod commands;
mod experiments;
mod manifest;
mod reproduce;
mod store;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ewc_core::continual::RegularizerKind;

#[derive(Parser, Debug)]
#[command(
    name = "ewcft",
    version,
    about = "Bias-mitigating fine-tuning with elastic weight consolidation",
    after_help = "Run directories go under --out-root, else the manifest's output_dir, \
                  else $EWCFT_OUT, else ./ewcft-runs. Set RUST_LOG to change log verbosity."
)]
struct Cli {
    /// Worker threads for independent runs [default: one per CPU]
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,

    /// Root directory for content-addressed run directories
    #[arg(long, global = true, value_name = "DIR")]
    out_root: Option<PathBuf>,

    /// Also append timestamped log lines to this file
    #[arg(long, global = true, value_name = "PATH")]
    log_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSONL and print its claim-label mutual information
    GenData(GenDataArgs),
    /// Train a model from scratch
    Train(TrainArgs),
    /// Fine-tune a checkpoint, optionally with an L2 or EWC penalty
    Finetune(FinetuneArgs),
    /// Cross-validate a hyperparameter grid and evaluate every grid point on the test sets
    Sweep(SweepArgs),
    /// Fine-tune on nested subsamples of FT-train
    Ablate(AblateArgs),
    /// Pareto frontiers of sweep points and whether EWC dominates FT
    Pareto(ParetoArgs),
    /// Run every manifest condition on every seed and write the results table
    Report(ReportArgs),
    /// Run the synthetic experiment suite and print one pass/fail line per check
    ReproducePaperAnalogs(ReproduceArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Original,
    Symmetric,
    SingleLabel,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,

    /// Generator seed [default: the config's, else 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of instances [default: original 20000 (or the config's), symmetric 700, single-label 1000]
    #[arg(long)]
    pub n: Option<usize>,

    /// Probability that a claim carries a label cue
    #[arg(long, value_parser = probability)]
    pub bias_strength: Option<f64>,

    /// Generator rules as JSON; flags override
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Take the generator rules from an existing generated dataset (symmetric only)
    #[arg(long, value_name = "PATH", conflicts_with_all = ["config", "bias_strength"])]
    pub rules_from: Option<PathBuf>,

    /// Output JSONL file
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

/// Overrides for the optimizer fields of a training config.
#[derive(Args, Debug)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient-norm clip
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Pair,
    ClaimOnly,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config JSON (optimizer fields plus architecture, embed_dim, hidden_dim); flags override
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Training data (JSONL)
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    /// Held-out data for early stopping
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,

    /// Checkpoint path [default: checkpoint.json in a run directory]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Per-epoch CSV [default: next to the checkpoint]
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,

    #[command(flatten)]
    pub train: TrainOverrides,

    /// Stop after this many epochs without a better dev accuracy
    #[arg(long, requires = "dev")]
    pub patience: Option<usize>,

    #[arg(long, value_enum)]
    pub architecture: Option<Arch>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reg {
    None,
    L2,
    Ewc,
}

impl From<Reg> for RegularizerKind {
    fn from(r: Reg) -> Self {
        match r {
            Reg::None => RegularizerKind::None,
            Reg::L2 => RegularizerKind::L2,
            Reg::Ewc => RegularizerKind::Ewc,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Fine-tuning config JSON; flags override
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Checkpoint to start from
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "PATH")]
    pub ft_train: PathBuf,

    /// Original-task training data; EWC estimates its Fisher weights here
    #[arg(long, value_name = "PATH")]
    pub original: Option<PathBuf>,

    /// Evaluated after every epoch
    #[arg(long, value_name = "PATH")]
    pub ft_test: Option<PathBuf>,

    /// Evaluated after every epoch
    #[arg(long, value_name = "PATH")]
    pub original_test: Option<PathBuf>,

    /// Checkpoint path [default: checkpoint.json in a run directory]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Per-epoch CSV [default: next to the checkpoint]
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,

    #[command(flatten)]
    pub train: TrainOverrides,

    #[arg(long, value_enum)]
    pub regularizer: Option<Reg>,

    /// Penalty strength
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Original-task instances drawn for each Fisher estimate
    #[arg(long)]
    pub fisher_samples: Option<usize>,

    /// Estimate the Fisher once instead of before every epoch
    #[arg(long)]
    pub fisher_once: bool,

    /// Fine-tune on a seeded subsample of at most this many instances
    #[arg(long)]
    pub ft_train_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,

    /// Regularizer to sweep [default: the manifest's fine-tuning regularizer]
    #[arg(long, value_enum)]
    pub regularizer: Option<Reg>,

    #[arg(long)]
    pub epochs_max: Option<usize>,

    #[arg(long)]
    pub k_folds: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,

    /// FT-train sizes, ascending [default: the manifest's, else the standard 12 that fit]
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct ParetoArgs {
    /// sweep_points.csv of the EWC sweep
    #[arg(long, value_name = "PATH")]
    pub ewc: PathBuf,

    /// sweep_points.csv of the unregularized sweep
    #[arg(long, value_name = "PATH")]
    pub ft: PathBuf,

    /// sweep_points.csv of the L2 sweep
    #[arg(long, value_name = "PATH")]
    pub l2: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    /// Experiment config JSON [default: the built-in synthetic setup]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run only these checks (1-11)
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=11))]
    pub only: Option<Vec<u8>>,
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

/// A flag combination clap cannot express; reported like a parse error.
pub fn usage_error(msg: impl std::fmt::Display) -> anyhow::Error {
    Cli::command()
        .error(clap::error::ErrorKind::ArgumentConflict, msg)
        .into()
}

fn init_logging(cli: &Cli) -> anyhow::Result<()> {
    let file = match &cli.log_file {
        Some(p) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("cannot open log file {}", p.display()))?,
        )),
        None => None,
    };
    // per-epoch library logs are wanted for single runs, not for grids of them
    let default = match cli.command {
        Command::Train(_) | Command::Finetune(_) => "info",
        _ => "info,ewc_core=warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format(move |buf, record| {
            if let Some(f) = &file {
                let mut f = f.lock().expect("log file lock");
                writeln!(
                    f,
                    "{} {:<5} {}: {}",
                    buf.timestamp_millis(),
                    record.level(),
                    record.target(),
                    record.args()
                )?;
            }
            writeln!(buf, "[{}] {}", record.level(), record.args())
        })
        .init();
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .context("cannot start worker threads")?;
    }
    let root = cli.out_root.as_deref();
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a)?,
        Command::Train(a) => commands::train(&a, root)?,
        Command::Finetune(a) => commands::finetune(&a, root)?,
        Command::Sweep(a) => experiments::sweep(&a, root)?,
        Command::Ablate(a) => experiments::ablate(&a, root)?,
        Command::Pareto(a) => experiments::pareto(&a, root)?,
        Command::Report(a) => experiments::report(&a, root)?,
        Command::ReproducePaperAnalogs(a) => return reproduce::run(&a, root),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging(&cli) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => match e.downcast::<clap::Error>() {
            Ok(usage) => usage.exit(),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}
