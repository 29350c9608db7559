//! Command implementations behind the `fairrec` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use fairrec_core::data::{load_interactions, split_leave_latest, DataSplit, Dataset};
use fairrec_core::synthetic::generate;
use fairrec_core::training::TrainError;
use serde::Serialize;

pub mod analyze;
pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_MISSING_ARTIFACT: i32 = 4;
pub const EXIT_NO_REPORTS: i32 = 5;
const EXIT_OTHER: i32 = 1;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait ExitCode<T> {
    fn exit_code(self, code: i32) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitCode<T> for Result<T, E> {
    fn exit_code(self, code: i32) -> CliResult<T> {
        self.map_err(|e| CliError { code, error: e.into() })
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_OTHER, error }
    }
}

impl From<std::io::Error> for CliError {
    fn from(error: std::io::Error) -> Self {
        Self { code: EXIT_OTHER, error: error.into() }
    }
}

/// Training failures map to exit 3 except for bad input.
pub fn train_failure(e: TrainError) -> CliError {
    let code = match e {
        TrainError::EmptyTrain | TrainError::InvalidConfig(_) => EXIT_INPUT,
        _ => EXIT_TRAINING,
    };
    CliError { code, error: e.into() }
}

#[derive(Debug, Parser)]
#[command(name = "fairrec", version, about = "Marketing-bias analysis and fairness-aware recommendation")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training and generation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Interaction CSV; overrides the config's data path.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Recommendation list length.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Contingency, chi-square, ANOVA and segment-mean tables.
    Analyze,
    /// Write a synthetic dataset as canonical CSV.
    Synth,
    /// Fit one model and save it with its training history.
    Train,
    /// Score a saved model on the test split.
    Evaluate {
        /// Model file; defaults to `<out>/model.bin`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Grid-search every loss variant and compare against baselines.
    Sweep,
    /// Merge metric files in the output directory into one table.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

/// Resolved inputs shared by every command.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

/// A loaded dataset with its name and split.
pub struct LoadedData {
    pub name: String,
    pub dataset: Dataset,
    pub split: DataSplit,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> CliResult<Self> {
        let mut config = match &cli.config {
            Some(path) => ExperimentConfig::load(path).exit_code(EXIT_INPUT)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        if let Some(path) = &cli.dataset {
            config.data.path = Some(path.clone());
        }
        if let Some(k) = cli.k {
            config.eval.k = k;
        }
        config.validate().exit_code(EXIT_INPUT)?;
        Ok(Self { config, out: cli.out.clone() })
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// CSV from the data path, else the synthetic generator.
    pub fn load_data(&self) -> CliResult<LoadedData> {
        let data = &self.config.data;
        let (name, dataset) = if let Some(path) = &data.path {
            if !path.exists() {
                return Err(anyhow::anyhow!("dataset not found: {}", path.display())).exit_code(EXIT_INPUT);
            }
            let (ds, report) = load_interactions(path, &data.columns)
                .with_context(|| format!("cannot load {}", path.display()))
                .exit_code(EXIT_INPUT)?;
            log::info!(
                "loaded {} interactions from {} ({} rows read, {} without product image, {} unknown identity)",
                ds.len(),
                path.display(),
                report.rows_read,
                report.rejected_no_image,
                report.unknown_identity_rows
            );
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (data.name.clone().unwrap_or(stem), ds)
        } else if let Some(synth) = &self.config.synth {
            let ds = generate(synth).exit_code(EXIT_INPUT)?;
            (data.name.clone().unwrap_or_else(|| "synthetic".into()), ds)
        } else {
            return Err(anyhow::anyhow!("no dataset: pass --dataset or add a [synth] section")).exit_code(EXIT_INPUT);
        };
        let split = split_leave_latest(&dataset);
        Ok(LoadedData { name, dataset, split })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Worker count for sweeps: `FAIRREC_THREADS` if set, else all cores.
pub fn sweep_threads() -> usize {
    std::env::var("FAIRREC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    started: String,
    finished: String,
    success: bool,
    config_hash: String,
}

/// Runs one command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let started = chrono::Utc::now().to_rfc3339();
    let result = Context::from_cli(&cli).and_then(|ctx| {
        std::fs::create_dir_all(&ctx.out)
            .with_context(|| format!("cannot create {}", ctx.out.display()))
            .exit_code(EXIT_INPUT)?;
        let outcome = dispatch(&cli.command, &ctx);
        // timestamps live only in the manifest so other outputs stay byte-stable
        let manifest = RunManifest {
            command: cli.command.name(),
            started,
            finished: chrono::Utc::now().to_rfc3339(),
            success: outcome.is_ok(),
            config_hash: fairrec_core::training::config_hash(&ctx.config),
        };
        write_json(&ctx.out_path(&format!("run-manifest-{}.json", cli.command.name())), &manifest)?;
        outcome
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: &Command, ctx: &Context) -> CliResult<()> {
    match command {
        Command::Analyze => analyze::cmd_analyze(ctx),
        Command::Synth => pipeline::cmd_synth(ctx),
        Command::Train => pipeline::cmd_train(ctx),
        Command::Evaluate { model } => pipeline::cmd_evaluate(ctx, model.as_deref()),
        Command::Sweep => pipeline::cmd_sweep(ctx),
        Command::Report => report::cmd_report(ctx),
    }
}
