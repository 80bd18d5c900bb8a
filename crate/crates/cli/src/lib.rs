//! Command-line driver: run a strategy over a prompt file, analyze run
//! directories, fit scaling curves.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml        byte copy of the input config
//! prompts.jsonl      byte copy of the input prompts
//! samples.jsonl      one line per sample, prompt order then sample order
//! trees/<id>.json    search tree per prompt (tree search only)
//! ledger.json        FLOPs and tokens, per prompt and in total
//! manifest.json      run id, overrides, timestamps, file list
//! ```

pub mod analyze;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use toa_core::compute::BudgetLedger;
use toa_core::io::IoError;
use toa_core::Strategy;

pub use analyze::cmd_analyze;
pub use run::cmd_run;

#[derive(Debug, Parser)]
#[command(name = "toa", version, about = "Multi-agent best-of-N sampling and tree search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy over every prompt in a JSONL file.
    Run(RunArgs),
    /// Write CSV/DOT reports for one or more run directories.
    Analyze(AnalyzeArgs),
    /// Fit `R = a·log10(C)² + b·log10(C) + c` to a `compute,reward` CSV.
    Fit(FitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// JSONL of `{prompt_id, question, answer?}`.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompts processed concurrently (default: available cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Report {
    /// Most frequent best refinement paths, plus DOT renderings of the trees.
    Paths,
    /// Predecessor/successor proportions along best paths.
    Transitions,
    /// Best reward per agent and layer.
    Layers,
    /// (FLOPs, top-k reward) per run and a fitted curve.
    Scaling,
    /// Best-of-N, top-k mean and majority vote per prompt.
    Select,
}

impl Report {
    pub fn needs_trees(self) -> bool {
        matches!(self, Report::Paths | Report::Transitions | Report::Layers)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Report::Paths => "paths",
            Report::Transitions => "transitions",
            Report::Layers => "layers",
            Report::Scaling => "scaling",
            Report::Select => "select",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Run directory; repeat for multi-run reports such as scaling.
    #[arg(long = "run-dir", required = true)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub report: Report,
    /// Output directory (default: `<first run dir>/reports`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rows kept in ranked tables.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    /// k for top-k mean rewards (capped at N).
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Majority vote over the first n samples (default: all).
    #[arg(long)]
    pub first_n: Option<usize>,
    /// Answer pattern for voting; capture group 1 if present.
    #[arg(long)]
    pub answer_regex: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV with a header and `compute,reward` columns.
    #[arg(long)]
    pub points: PathBuf,
    /// Write the fit here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] toa_core::Error),
    #[error("report `{report}` needs search trees, but {run_dir} was a {strategy} run")]
    MissingArtifact {
        report: &'static str,
        run_dir: PathBuf,
        strategy: Strategy,
    },
    #[error("{0}")]
    Input(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Input(_) => "input",
        }
    }

    /// Process exit code: 2 for bad configuration or input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(toa_core::Error::Config(_) | toa_core::Error::Load(_)) | CliError::Input(_) => 2,
            _ => 1,
        }
    }
}

/// Machine-readable failure report written as `error.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    /// Individual problems, for configuration errors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl From<&CliError> for ErrorReport {
    fn from(e: &CliError) -> Self {
        let details = match e {
            CliError::Core(toa_core::Error::Config(errs)) => errs.0.iter().map(|c| c.to_string()).collect(),
            _ => Vec::new(),
        };
        ErrorReport {
            kind: e.kind().to_string(),
            message: e.to_string(),
            details,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub prompt_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub config: String,
    pub prompts: String,
    pub samples: String,
    pub ledger: String,
    #[serde(default)]
    pub trees: Vec<TreeFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub total_flops: f64,
    pub generation_flops: f64,
    pub reward_flops: f64,
    pub calls: u64,
    pub mean_flops_per_prompt: f64,
}

impl LedgerSummary {
    pub fn new(total: &BudgetLedger, prompts: usize) -> Self {
        Self {
            total_flops: total.total_flops,
            generation_flops: total.generation_flops(),
            reward_flops: total.reward_flops(),
            calls: total.calls(),
            mean_flops_per_prompt: total.total_flops / prompts.max(1) as f64,
        }
    }
}

/// Written last; its presence marks a complete run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of config bytes, prompt bytes and overrides.
    pub run_id: String,
    pub strategy: Strategy,
    pub n: usize,
    pub k: usize,
    pub master_seed: u64,
    pub overrides: Overrides,
    pub prompt_count: usize,
    pub started_at: chrono::DateTime<chrono::Utc>,
    pub finished_at: chrono::DateTime<chrono::Utc>,
    pub outputs: RunOutputs,
    pub ledger: LedgerSummary,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

/// Per-prompt and total usage, as stored in `ledger.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFile {
    pub total: BudgetLedger,
    pub per_prompt: Vec<PromptLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLedger {
    pub prompt_id: String,
    pub ledger: BudgetLedger,
}

/// Runs a parsed command line, returning the process exit code. Failures
/// of `run` also leave `error.json` in the output directory.
pub fn execute(cli: Cli) -> i32 {
    let (result, error_dir) = match cli.command {
        Command::Run(args) => {
            let out = args.out.clone();
            (cmd_run(&args).map(|m| println!("{}", m.run_id)), Some(out))
        }
        Command::Analyze(args) => (
            cmd_analyze(&args).map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            }),
            None,
        ),
        Command::Fit(args) => (analyze::cmd_fit(&args), None),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(dir) = error_dir {
                let _ = toa_core::io::write_json(&dir.join(ERROR_FILE), &ErrorReport::from(&e));
            }
            e.exit_code()
        }
    }
}
