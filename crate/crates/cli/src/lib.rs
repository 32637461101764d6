//! The `fmerge` command line: lab generation, merging, expert extraction,
//! routed evaluation, and filter sweeps.
//!
//! Every command reads an optional `--config` JSON file whose keys mirror the
//! flags; flags given on the command line win. Outputs are written to a temp
//! file and renamed into place, so a failing command leaves nothing behind.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod config;
mod eval;
mod lab;
mod merge;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Method, ModeArg, PipelineConfig, RouterArg};
pub use eval::{
    cmd_eval, cmd_sweep, eval_csv, sweep_csv, EvalReport, EvalRow, SweepRow, DEFAULT_RHOS,
    EVAL_HEADER,
};
pub use lab::{cmd_lab, LabManifest, LabTask, MANIFEST};
pub use merge::{cmd_extract, cmd_merge, load_inputs, ExtractOutcome, MergeInputs, MergeOutcome};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or missing input files (exit 2).
    Usage(String),
    /// Failure while doing the work (exit 1).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<fmerge_core::Error> for CliError {
    fn from(e: fmerge_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fmerge",
    version,
    about = "Frequency-domain model merging with routed sparse experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy lab: pretrained + fine-tuned checkpoints and datasets.
    Lab(LabArgs),
    /// Merge fine-tuned checkpoints into one backbone.
    Merge(MergeArgs),
    /// Extract rescaled sparse experts bound to a backbone.
    Extract(ExtractArgs),
    /// Evaluate a backbone, optionally with routed experts.
    Eval(EvalArgs),
    /// Sweep filter modes and cutoffs over lab seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with default values for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Lab directory (reads its manifest).
    #[arg(long)]
    pub lab: Option<PathBuf>,
    #[arg(long)]
    pub pre: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub fine: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct LabArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lab_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub keep_frac: Option<f64>,
    #[arg(long)]
    pub drop_p: Option<f64>,
    /// Directory for per-tensor spectrum CSVs of the task vectors.
    #[arg(long)]
    pub dump_spectrum: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lab: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub router: Option<RouterArg>,
    /// Number of consecutive router seeds starting at --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lab: Option<PathBuf>,
    #[arg(long)]
    pub lab_config: Option<PathBuf>,
    /// Comma-separated cutoff grid.
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub modes: Option<Vec<ModeArg>>,
    /// Number of consecutive lab seeds starting at --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
}

impl Common {
    fn base(&self) -> PipelineConfig {
        PipelineConfig {
            out: self.out.clone(),
            seed: self.seed,
            ..Default::default()
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Lab(a) => &a.common,
            Command::Merge(a) => &a.common,
            Command::Extract(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Sweep(a) => &a.common,
        }
    }

    /// The flags given on the command line, as a config layer.
    pub fn flags(&self) -> PipelineConfig {
        let base = self.common().base();
        match self {
            Command::Lab(a) => PipelineConfig {
                lab_config: a.lab_config.clone(),
                ..base
            },
            Command::Merge(a) => PipelineConfig {
                lab: a.inputs.lab.clone(),
                pre: a.inputs.pre.clone(),
                fine: a.inputs.fine.clone(),
                method: a.method,
                rho: a.rho,
                mode: a.mode,
                lambda: a.lambda,
                keep_frac: a.keep_frac,
                drop_p: a.drop_p,
                dump_spectrum: a.dump_spectrum.clone(),
                ..base
            },
            Command::Extract(a) => PipelineConfig {
                lab: a.inputs.lab.clone(),
                pre: a.inputs.pre.clone(),
                fine: a.inputs.fine.clone(),
                backbone: a.backbone.clone(),
                d: a.d,
                ..base
            },
            Command::Eval(a) => PipelineConfig {
                lab: a.lab.clone(),
                backbone: a.backbone.clone(),
                bundle: a.bundle.clone(),
                router: a.router,
                seeds: a.seeds,
                ..base
            },
            Command::Sweep(a) => PipelineConfig {
                lab: a.lab.clone(),
                lab_config: a.lab_config.clone(),
                rhos: a.rhos.clone(),
                modes: a.modes.clone(),
                seeds: a.seeds,
                ..base
            },
        }
    }

    /// Config file values overridden by flags.
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let file = match &self.common().config {
            Some(path) => {
                config::existing(path, "config file")?;
                PipelineConfig::from_json_file(path)?
            }
            None => PipelineConfig::default(),
        };
        Ok(file.overlay(self.flags()))
    }

    /// Runs the command and returns a one-line summary.
    pub fn execute(&self) -> Result<String, CliError> {
        let cfg = self.resolve()?;
        match self {
            Command::Lab(_) => {
                let m = cmd_lab(&cfg)?;
                let acc: Vec<String> = m
                    .tasks
                    .iter()
                    .map(|t| format!("{}={:.3}", t.task_id, t.finetuned_accuracy))
                    .collect();
                Ok(format!(
                    "lab seed {} written to {} (fine-tuned accuracy {})",
                    m.seed,
                    cfg.out()?.display(),
                    acc.join(" ")
                ))
            }
            Command::Merge(_) => {
                let o = cmd_merge(&cfg)?;
                Ok(format!(
                    "{} backbone ({} tasks, {} params) written to {}; report {}",
                    o.report.method,
                    o.report.task_count,
                    o.report.param_count,
                    o.backbone.display(),
                    o.report_path.display()
                ))
            }
            Command::Extract(_) => {
                let o = cmd_extract(&cfg)?;
                let counts: Vec<String> = o
                    .experts
                    .experts()
                    .iter()
                    .map(|e| format!("{}={} (mu {:.4})", e.task_id, e.entry_count(), e.mu))
                    .collect();
                Ok(format!(
                    "bundle written to {}: {}",
                    o.bundle.display(),
                    counts.join(", ")
                ))
            }
            Command::Eval(_) => {
                let r = cmd_eval(&cfg)?;
                Ok(eval_csv(&r.rows).trim_end().to_string())
            }
            Command::Sweep(_) => {
                let rows = cmd_sweep(&cfg)?;
                Ok(format!(
                    "{} sweep rows written to {}",
                    rows.len(),
                    cfg.out()?.display()
                ))
            }
        }
    }
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command.execute() {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "fmerge: {e}");
            e.exit_code()
        }
    }
}
