//! `share`: command-line front end for continual shared-subspace adaptation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use share_core::{ErrorCategory, ShareError};

#[derive(Debug, Parser)]
#[command(name = "share", version, about = "Continual shared-subspace adaptation of low-rank adapters")]
pub struct Cli {
    /// Worker threads for layer-parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Refuse anything that would touch a past task's training data (default).
    #[arg(long, global = true, conflicts_with = "relax_cl")]
    pub strict_cl: bool,

    /// Allow revisiting past task data, e.g. for coefficient refits.
    #[arg(long, global = true)]
    pub relax_cl: bool,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Continual-learning policy requested on the command line, if any.
    pub fn strict_override(&self) -> Option<bool> {
        match (self.strict_cl, self.relax_cl) {
            (_, true) => Some(false),
            (true, false) => Some(true),
            _ => None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a state from existing adapters.
    Init(InitArgs),
    /// Train temporary factors for one task of a synthetic stream.
    Adapt(AdaptArgs),
    /// Fold trained temporaries or a raw adapter into a state.
    Merge(MergeArgs),
    /// Compress a directory of adapters into one state.
    Compress(CompressArgs),
    /// Export one task of a state as a plain adapter.
    Reconstruct(ReconstructArgs),
    /// Run the continual pipeline over a synthetic stream.
    Simulate(SimulateArgs),
    /// Sample-size curves for fits restricted to a frozen basis.
    #[command(name = "probe-theorem1")]
    ProbeTheorem1(ProbeArgs),
    /// Forgetting and backward transfer of an evaluation grid.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub adapters: Vec<PathBuf>,
    #[arg(long, conflicts_with = "var_threshold", required_unless_present = "var_threshold")]
    pub k: Option<usize>,
    #[arg(long)]
    pub var_threshold: Option<f64>,
    /// Coefficient width; defaults to the largest adapter rank.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// `config.json#index`: task `index` of the stream described by the config.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub phi: Option<usize>,
    /// Name for the new task; defaults to the stream's task name.
    #[arg(long)]
    pub task_name: Option<String>,
    /// Refit the coefficients of a task already in the state instead of
    /// training temporaries. Needs --relax-cl.
    #[arg(long)]
    pub refit_coefficients: bool,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// Temporary factors or an adapter file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub task_name: Option<String>,
    /// Override the state's k, e.g. `fixed:16` or `var:0.9`.
    #[arg(long)]
    pub k_policy: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Directory of adapter files (`*.shrx`), taken in file-name order.
    #[arg(long)]
    pub adapters: PathBuf,
    #[arg(long, default_value = "var:0.6")]
    pub k_policy: String,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stream task to probe.
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value = "peak")]
    pub mode: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 1,
        ErrorCategory::Validation => 2,
        ErrorCategory::Numeric => 3,
    }
}

fn fail(err: &ShareError) -> ExitCode {
    let category = err.category();
    let line = err.to_string().replace('\n', " ");
    eprintln!("error[{}]: {line}", category.label());
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let seed = std::env::var(share_core::io::SEED_ENV).ok();
    log::info!("command: {:?}", cli.command);
    log::info!(
        "threads={} strict_cl={} seed override={}",
        cli.threads,
        cli.strict_override().map_or("from config".to_string(), |s| s.to_string()),
        seed.as_deref().unwrap_or("none")
    );
    match share_core::parallel::with_threads(cli.threads, || commands::run(&cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
