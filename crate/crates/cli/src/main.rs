//! `kfusion`: train desk-scale classifiers, diagnose local overfitting,
//! fuse checkpoints and condense the result, plus the deep linear lab.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "kfusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML or JSON config and write logs, weights and a manifest.
    Train(TrainArgs),
    /// Forget/learn curves, forget times and large-loss counts for one log.
    Metrics(MetricsArgs),
    /// Fit, apply or compare Knowledge Fusion plans.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Collapse a fused ensemble into a single model.
    Condense(CondenseArgs),
    /// Deep linear network dynamics against their closed form.
    Lab(LabArgs),
    /// CSV and SVG charts for every log of a run.
    Report(ReportArgs),
    /// Train, fuse, condense and report in one go.
    Pipeline(PipelineArgs),
    /// Convert long-format CSV predictions into a KFPL log.
    ImportCsv(ImportArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config seed. Repeat to train several seeds, each into
    /// `<out>/seed-<n>`.
    #[arg(long)]
    pub seed: Vec<u64>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference epoch for F and L; defaults to the last epoch.
    #[arg(long)]
    pub reference: Option<usize>,
    /// Large-loss threshold; defaults to ln C.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ReferenceArg {
    Last,
    Best,
}

#[derive(Args, Clone)]
pub struct FitFlags {
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eps_step: f64,
    /// Final model to improve on: the last epoch or the best one on the log.
    #[arg(long, value_enum, default_value_t = ReferenceArg::Last)]
    pub reference: ReferenceArg,
    /// Explicit reference epoch; overrides `--reference`.
    #[arg(long)]
    pub reference_epoch: Option<usize>,
}

#[derive(Subcommand)]
pub enum FuseCommand {
    /// Fit a plan on a validation log.
    Fit {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Apply a plan to a log and compare against its reference epoch.
    Apply {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Write fused probabilities as `example,class,prob`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Uniform ensembles of k checkpoints.
    Baseline {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    Horizontal,
    Jumps,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CondenseMode {
    Distill,
    Average,
}

#[derive(Args, Clone)]
pub struct CondenseFlags {
    #[arg(long, default_value_t = 2.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
}

#[derive(Args)]
pub struct CondenseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub mode: CondenseMode,
    /// Plan file; defaults to the first plan listed in the manifest.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output stem for `<stem>.json` and `<stem>.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// Student seed; defaults to the run's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub flags: CondenseFlags,
}

#[derive(Args)]
pub struct LabArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = CondenseMode::Average)]
    pub condense: CondenseMode,
    #[command(flatten)]
    pub fit: FitFlags,
    #[command(flatten)]
    pub condense_flags: CondenseFlags,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
pub struct ImportArgs {
    /// `epoch,example,class,prob` rows.
    #[arg(long)]
    pub probs: PathBuf,
    /// `example,label[,noisy]` rows.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Metrics(args) => commands::metrics(&args),
        Command::Fuse(cmd) => commands::fuse_cmd(&cmd),
        Command::Condense(args) => commands::condense(&args),
        Command::Lab(args) => commands::lab(&args),
        Command::Report(args) => commands::report(&args),
        Command::Pipeline(args) => commands::pipeline(&args),
        Command::ImportCsv(args) => commands::import_csv(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code() as u8)
        }
    }
}
