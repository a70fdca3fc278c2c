//! Command-line interface: `validate`, `run`, `score` and `report`.
//!
//! Values are layered: flags override the `--config` JSON file, which
//! overrides built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::cascade::{builtin_strategy, load_strategy_file, CascadeSpec, BUILTIN_STRATEGIES};
use crate::dataset::{dataset_hash, load_dataset, load_dataset_lenient, validate_dataset, DatasetError, DatasetFormat};
use crate::llm::{
    with_retry, ChatBackend, ConcurrencyLimit, LlmError, MockBackend, OpenAiBackend, RunConfig, BASE_URL_ENV,
    DEFAULT_BASE_URL, DEFAULT_SYSTEM_MESSAGE,
};
use crate::metrics::{HashScorer, RemoteScorer, Scorers};
use crate::runner::{
    aggregate, backfill_scores, content_hash, refresh_run_means, render_report, run_experiment, BackfillError,
    Experiment, Manifest, Reduction, ReportFormat, RunStore, StrategyManifest,
};

pub const SCORER_URL_ENV: &str = "SCORER_URL";
pub const DEFAULT_STORE: &str = "runs.jsonl";

/// Exit codes.
pub const EXIT_OK: i32 = 0;
/// Invalid data: dataset violations, empty store.
pub const EXIT_INVALID: i32 = 1;
/// I/O, usage or configuration errors.
pub const EXIT_ERROR: i32 = 2;
/// The scorer service could not be reached.
pub const EXIT_SCORER_UNAVAILABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cascade-eval",
    version,
    about = "Run and score multi-stage empathetic prompt cascades"
)]
pub struct Cli {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run store (JSONL). Default: runs.jsonl
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Use the deterministic mock backend and hash-based fake scorers.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Seed for the mock backend and fake scorers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum in-flight cascades / requests.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset file; prints one line per violation.
    Validate(DatasetArgs),
    /// Execute strategies over the dataset and append records to the store.
    Run(RunArgs),
    /// Score completed records that have no scores yet.
    Score(ScoreArgs),
    /// Aggregate the store and print the results table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset file (.csv or .jsonl).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<DatasetFormat>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Comma-separated strategy names. Default: all built-ins plus any from --strategy-file.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// JSON file with custom strategies.
    #[arg(long)]
    pub strategy_file: Option<PathBuf>,
    /// Comma-separated model names.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub system_message: Option<String>,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long, env = BASE_URL_ENV)]
    pub base_url: Option<String>,
    /// Scoring service URL; without it (and without --mock) records are stored unscored.
    #[arg(long, env = SCORER_URL_ENV)]
    pub scorer_url: Option<String>,
    /// Store records unscored even when a scorer is available.
    #[arg(long)]
    pub no_score: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, env = SCORER_URL_ENV)]
    pub scorer_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// markdown or csv.
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// run-means (default) or pooled.
    #[arg(long)]
    pub reduction: Option<Reduction>,
    /// Write to a file instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_format: Option<DatasetFormat>,
    pub strategies: Option<Vec<String>>,
    pub strategy_file: Option<PathBuf>,
    pub models: Option<Vec<String>>,
    pub run: Option<RunConfig>,
    pub base_url: Option<String>,
    pub scorer_url: Option<String>,
    pub store: Option<PathBuf>,
    pub report_format: Option<String>,
    pub reduction: Option<String>,
    pub mock: Option<bool>,
    pub seed: Option<u64>,
    pub concurrency: Option<usize>,
}

/// A failure mapped to an exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn error(message: impl Into<String>) -> Self {
        Self::new(EXIT_ERROR, message)
    }
}

type CliResult = Result<i32, CliError>;
type Factory = Box<dyn Fn(&str, u32) -> Arc<dyn ChatBackend> + Sync>;

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

struct Globals {
    file: CliConfig,
    store: PathBuf,
    mock: bool,
    seed: u64,
    concurrency: Option<usize>,
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let file = match &cli.config {
        Some(path) => read_config(path)?,
        None => CliConfig::default(),
    };
    let globals = Globals {
        store: cli
            .store
            .or_else(|| file.store.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE)),
        mock: cli.mock || file.mock.unwrap_or(false),
        seed: cli.seed.or(file.seed).unwrap_or(0),
        concurrency: cli.concurrency.or(file.concurrency),
        file,
    };
    match cli.command {
        Command::Validate(args) => cmd_validate(&globals, &args, out),
        Command::Run(args) => cmd_run(&globals, &args, out, err),
        Command::Score(args) => cmd_score(&globals, &args, out),
        Command::Report(args) => cmd_report(&globals, &args, out),
    }
}

fn read_config(path: &Path) -> Result<CliConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", path.display())))
}

fn resolve_dataset(g: &Globals, args: &DatasetArgs) -> Result<(PathBuf, DatasetFormat), CliError> {
    let path = args
        .dataset
        .clone()
        .or_else(|| g.file.dataset.clone())
        .ok_or_else(|| CliError::error("no dataset given (use --dataset)"))?;
    let format = args
        .format
        .or(g.file.dataset_format)
        .or_else(|| DatasetFormat::from_path(&path))
        .ok_or_else(|| CliError::error(format!("cannot infer format of {}; use --format", path.display())))?;
    Ok((path, format))
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::NotFound(_) | DatasetError::Io { .. } => CliError::error(e.to_string()),
        other => CliError::new(EXIT_INVALID, other.to_string()),
    }
}

fn cmd_validate(g: &Globals, args: &DatasetArgs, out: &mut dyn Write) -> CliResult {
    let (path, format) = resolve_dataset(g, args)?;
    let entries = load_dataset_lenient(&path, format).map_err(dataset_error)?;
    let violations = validate_dataset(&entries);
    for v in &violations {
        let _ = writeln!(out, "{}: {v}", path.display());
    }
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_INVALID })
}

fn resolve_run_config(g: &Globals, args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = g.file.run.clone().unwrap_or_default();
    if let Some(r) = args.repetitions {
        config.repetitions = r;
    }
    if let Some(t) = args.temperature {
        config.temperature = t;
    }
    if let Some(m) = args.max_tokens {
        config.max_tokens = m;
    }
    if let Some(s) = &args.system_message {
        config.system_message = s.clone();
    }
    if let Some(c) = g.concurrency {
        config.concurrency = c;
    }
    config
        .validate()
        .map_err(|e| CliError::new(EXIT_INVALID, format!("invalid configuration: {e}")))?;
    Ok(config)
}

fn resolve_strategies(g: &Globals, args: &RunArgs, config: &RunConfig) -> Result<Vec<CascadeSpec>, CliError> {
    let custom = match args.strategy_file.as_ref().or(g.file.strategy_file.as_ref()) {
        Some(path) => load_strategy_file(path).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?,
        None => Vec::new(),
    };
    let names: Vec<String> = match args.strategies.clone().or_else(|| g.file.strategies.clone()) {
        Some(n) => n
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => BUILTIN_STRATEGIES
            .iter()
            .map(|s| s.to_string())
            .chain(custom.iter().map(|s| s.strategy_name.clone()))
            .filter({
                let mut seen = std::collections::HashSet::new();
                move |n| seen.insert(n.clone())
            })
            .collect(),
    };
    let mut specs = Vec::with_capacity(names.len());
    for name in names {
        let mut spec = match custom.iter().find(|s| s.strategy_name == name) {
            Some(s) => s.clone(),
            None => builtin_strategy(&name).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?,
        };
        if config.system_message != DEFAULT_SYSTEM_MESSAGE {
            spec.system_message = config.system_message.clone();
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn cmd_run(g: &Globals, args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let config = resolve_run_config(g, args)?;
    let strategies = resolve_strategies(g, args, &config)?;
    let models = args
        .models
        .clone()
        .or_else(|| g.file.models.clone())
        .unwrap_or_else(|| vec![config.model_name.clone()]);
    let (dataset_path, format) = resolve_dataset(g, &args.dataset)?;
    let entries = load_dataset(&dataset_path, format).map_err(dataset_error)?;

    let base_url = args
        .base_url
        .clone()
        .or_else(|| g.file.base_url.clone())
        .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
    let seed = g.seed;
    let factory: Factory = if g.mock {
        Box::new(move |_: &str, run: u32| {
            Arc::new(MockBackend::new(MockBackend::derive_seed(seed, run))) as Arc<dyn ChatBackend>
        })
    } else {
        let api = OpenAiBackend::from_env(&base_url, config.request_timeout()).map_err(|e| match e {
            LlmError::MissingCredentials(_) => CliError::error(format!("{e}; no requests were sent")),
            other => CliError::error(other.to_string()),
        })?;
        let shared: Arc<dyn ChatBackend> = Arc::new(with_retry(
            ConcurrencyLimit::new(api, config.concurrency),
            config.retry.clone(),
        ));
        Box::new(move |_: &str, _: u32| shared.clone())
    };

    let hash_scorer = HashScorer::new(seed);
    let remote = match (
        g.mock,
        args.no_score,
        args.scorer_url.clone().or_else(|| g.file.scorer_url.clone()),
    ) {
        (false, false, Some(url)) => {
            let r = RemoteScorer::new(url, Duration::from_secs(120)).map_err(|e| CliError::error(e.to_string()))?;
            match r.health() {
                Ok(()) => Some(r),
                Err(e) => {
                    let _ = writeln!(err, "warning: {e}; records will be stored unscored (run `score` later)");
                    None
                }
            }
        }
        _ => None,
    };
    let (scorers, scorer_name): (Option<Scorers<'_>>, Option<String>) = match (&remote, g.mock && !args.no_score) {
        (Some(r), _) => (Some(Scorers::uniform(r)), Some(format!("remote {}", r.base_url()))),
        (None, true) => (
            Some(Scorers::uniform(&hash_scorer)),
            Some(format!("hash-fake seed {seed}")),
        ),
        (None, false) => (None, None),
    };

    let store = RunStore::new(&g.store);
    let previous = store.read_manifest().map_err(|e| CliError::error(e.to_string()))?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: previous.as_ref().map(|m| m.created_at).unwrap_or_else(Utc::now),
        dataset_path: Some(dataset_path.display().to_string()),
        dataset_hash: dataset_hash(&entries),
        entries: entries.len(),
        strategies: strategies
            .iter()
            .map(|s| StrategyManifest {
                name: s.strategy_name.clone(),
                hash: s.hash(),
                stages: s.stage_count(),
            })
            .collect(),
        models: models.clone(),
        config: config.clone(),
        backend: if g.mock {
            "mock".into()
        } else {
            format!("openai-compatible {base_url}")
        },
        sampling: if g.mock { "deterministic" } else { "nondeterministic" }.into(),
        seed: g.mock.then_some(seed),
        scorer: scorer_name,
        run_means: previous.map(|m| m.run_means).unwrap_or_default(),
    };
    store
        .write_manifest(&manifest)
        .map_err(|e| CliError::error(e.to_string()))?;

    let experiment = Experiment {
        entries: &entries,
        strategies: &strategies,
        models: &models,
        config: &config,
    };
    let summary = run_experiment(&experiment, &factory, scorers, &store).map_err(|e| CliError::error(e.to_string()))?;
    refresh_run_means(&store).map_err(|e| CliError::error(e.to_string()))?;
    let records = store.load().map_err(|e| CliError::error(e.to_string()))?;

    let _ = writeln!(
        out,
        "{} new records ({} completed, {} failed); {} already in store",
        summary.new_records(),
        summary.completed,
        summary.failed,
        summary.skipped
    );
    if summary.unscored > 0 {
        let _ = writeln!(
            out,
            "{} records stored unscored; run `score` to backfill",
            summary.unscored
        );
    }
    let _ = writeln!(
        out,
        "store: {} ({} records, content hash {})",
        g.store.display(),
        records.len(),
        content_hash(&records)
    );
    Ok(EXIT_OK)
}

fn cmd_score(g: &Globals, args: &ScoreArgs, out: &mut dyn Write) -> CliResult {
    let store = RunStore::new(&g.store);
    let hash_scorer = HashScorer::new(g.seed);
    let remote;
    let scorers = if g.mock {
        Scorers::uniform(&hash_scorer)
    } else {
        let url = args
            .scorer_url
            .clone()
            .or_else(|| g.file.scorer_url.clone())
            .ok_or_else(|| CliError::error(format!("no scorer endpoint (use --scorer-url or {SCORER_URL_ENV})")))?;
        remote = RemoteScorer::new(url, Duration::from_secs(120)).map_err(|e| CliError::error(e.to_string()))?;
        remote
            .health()
            .map_err(|e| CliError::new(EXIT_SCORER_UNAVAILABLE, format!("{e}; store left untouched")))?;
        Scorers::uniform(&remote)
    };
    let summary = backfill_scores(&store, scorers).map_err(|e| match e {
        BackfillError::Unavailable(m) => CliError::new(
            EXIT_SCORER_UNAVAILABLE,
            format!("scorer unavailable ({m}); store left untouched"),
        ),
        BackfillError::Store(s) => CliError::error(s.to_string()),
    })?;
    if summary.scored > 0 {
        refresh_run_means(&store).map_err(|e| CliError::error(e.to_string()))?;
    }
    let _ = writeln!(
        out,
        "{} records scored ({} already scored)",
        summary.scored, summary.already_scored
    );
    Ok(EXIT_OK)
}

fn cmd_report(g: &Globals, args: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let format = match (args.format, &g.file.report_format) {
        (Some(f), _) => f,
        (None, Some(s)) => s.parse().map_err(CliError::error)?,
        (None, None) => ReportFormat::Markdown,
    };
    let reduction = match (args.reduction, &g.file.reduction) {
        (Some(r), _) => r,
        (None, Some(s)) => s.parse().map_err(CliError::error)?,
        (None, None) => Reduction::default(),
    };
    let store = RunStore::new(&g.store);
    let records = store.load().map_err(|e| CliError::error(e.to_string()))?;
    let aggregates = aggregate(&records, reduction)
        .map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", g.store.display())))?;
    let text = render_report(&aggregates, format);
    match &args.output {
        Some(path) => fs::write(path, text).map_err(|e| CliError::error(format!("{}: {e}", path.display())))?,
        None => {
            let _ = out.write_all(text.as_bytes());
        }
    }
    Ok(EXIT_OK)
}
