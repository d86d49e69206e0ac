//! The `toothlabel` command line. Each subcommand reads files written by an
//! earlier one and writes its own outputs atomically, so stages can be run,
//! rerun or replaced independently.

mod commands;
pub mod config;
mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running a stage. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub(crate) fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "toothlabel",
    about = "Report-driven tooth condition labeling pipeline",
    disable_version_flag = true
)]
pub struct Cli {
    /// Pipeline configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved inputs and outputs without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Print the version and the hashes of the bundled assets.
    #[arg(long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a directory of numbered `.txt` reports into a corpus file.
    ParseReports(ParseReportsArgs),
    /// Extract noun phrases from every report line.
    ExtractPhrases(ExtractPhrasesArgs),
    /// Count phrases and keep the allowlisted frequent ones.
    BuildVocab(BuildVocabArgs),
    /// Link conditions to teeth and write the label matrix.
    LinkLabels(LinkLabelsArgs),
    /// Filter and normalize a segmentation manifest.
    IngestSegmentation(IngestArgs),
    /// Cut less/more-context crops for every detected tooth.
    MakeCrops(MakeCropsArgs),
    /// Assign radiographs to train/val/test.
    Split(SplitArgs),
    /// Repeat positive training crops for one condition.
    Oversample(OversampleArgs),
    /// Per-condition MCC of predictions against labels.
    Evaluate(EvaluateArgs),
    /// Fleiss' kappa per condition over rater annotations.
    Kappa(KappaArgs),
    /// Least-squares fit between columns of a CSV file.
    FitTrend(FitTrendArgs),
    /// Draw the TP/FP/FN expert image set.
    SampleExpertSet(SampleExpertArgs),
    /// Consensus labels, leave-one-out scores and per-condition analysis.
    ConsensusEval(ConsensusArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ParseReportsArgs {
    #[arg(long)]
    pub reports_dir: Option<PathBuf>,
    /// JSON object mapping report id to image id.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Regex marking tooth presence/absence sentences; repeatable.
    #[arg(long = "presence-pattern")]
    pub presence_patterns: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExtractPhrasesArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// rules, remote or remote-then-rules.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub endpoint_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the full phrase frequency table as CSV.
    #[arg(long)]
    pub frequencies_out: Option<PathBuf>,
    #[arg(long)]
    pub min_count: Option<u64>,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub allowlist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LinkLabelsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    /// Ingested segmentation; adds all-negative records for unmentioned teeth.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MakeCropsArgs {
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated train,val,test fractions.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OversampleArgs {
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// 1-based condition index.
    #[arg(long)]
    pub condition: usize,
    #[arg(long)]
    pub factor: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Restrict to one split of this manifest.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub expert_set: Option<PathBuf>,
    /// student, expert or model; all raters when omitted.
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitTrendArgs {
    /// CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Regressor column; repeatable.
    #[arg(long = "x", required = true)]
    pub x: Vec<String>,
    #[arg(long)]
    pub y: String,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleExpertArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Draw only from the test split of this manifest.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated TP,FP,FN counts per condition.
    #[arg(long)]
    pub per_condition: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub expert_set: Option<PathBuf>,
    /// Model predictions to score alongside the raters.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    /// negative or positive.
    #[arg(long)]
    pub tie_policy: Option<String>,
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration; defaults to the `service` section of --config.
    #[arg(long)]
    pub service_config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    status: &'static str,
    kind: &'static str,
    exit_code: i32,
    message: &'a str,
}

/// Runs the command line and returns the process exit code. Errors are
/// reported on stderr as one JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => return report(&CliError::Validation(e.to_string())),
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    let message = e.to_string();
    let body = ErrorReport {
        status: "error",
        kind: e.kind(),
        exit_code: e.exit_code(),
        message: &message,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&body).expect("error report serializes")
    );
    e.exit_code()
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.version {
        println!("{}", commands::version_text());
        return Ok(());
    }
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let command = cli
        .command
        .ok_or_else(|| validation("no subcommand given; see --help"))?;
    commands::dispatch(command, &config, cli.dry_run)
}
