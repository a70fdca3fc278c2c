//! Experiment orchestration over entries × strategies × models × repetitions.
//!
//! Every (entry, strategy, model, run) tuple becomes one [`RunRecord`] in an
//! append-only [`RunStore`]. Existing keys are skipped, so an interrupted
//! experiment resumes where it stopped.

mod aggregate;
mod report;
mod store;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use log::{debug, info, warn};
use thiserror::Error;

use crate::cascade::{run_cascade, CascadeSpec, RunCascadeError};
use crate::dataset::{validate_dataset, PersonaEntry, Violation};
use crate::llm::{ChatBackend, ConfigError, RunConfig};
use crate::metrics::{score_response, MetricScores, MetricValue, Scorers};

pub use aggregate::{aggregate, run_means, strategy_order, AggregateError, AggregateResult, Reduction, RunMean};
pub use report::{best_rows, format_cell, render_report, ReportFormat};
pub use store::{content_hash, Manifest, RecordKey, RecordOutcome, RunRecord, RunStore, StoreError, StrategyManifest};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("dataset is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidDataset(Vec<Violation>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no strategies selected")]
    NoStrategies,
    #[error("no models selected")]
    NoModels,
    #[error("strategy `{0}` given twice")]
    DuplicateStrategy(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Produces the backend for one (model, run) pair.
pub trait ClientFactory: Sync {
    fn client(&self, model: &str, run_index: u32) -> Arc<dyn ChatBackend>;
}

impl<F> ClientFactory for F
where
    F: Fn(&str, u32) -> Arc<dyn ChatBackend> + Sync,
{
    fn client(&self, model: &str, run_index: u32) -> Arc<dyn ChatBackend> {
        self(model, run_index)
    }
}

pub struct Experiment<'a> {
    pub entries: &'a [PersonaEntry],
    pub strategies: &'a [CascadeSpec],
    pub models: &'a [String],
    pub config: &'a RunConfig,
}

impl Experiment<'_> {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.entries.is_empty() {
            return Err(RunnerError::EmptyDataset);
        }
        let violations = validate_dataset(self.entries);
        if !violations.is_empty() {
            return Err(RunnerError::InvalidDataset(violations));
        }
        if self.strategies.is_empty() {
            return Err(RunnerError::NoStrategies);
        }
        if self.models.is_empty() {
            return Err(RunnerError::NoModels);
        }
        let mut names = HashSet::new();
        for s in self.strategies {
            if !names.insert(&s.strategy_name) {
                return Err(RunnerError::DuplicateStrategy(s.strategy_name.clone()));
            }
        }
        self.config.validate()?;
        Ok(())
    }

    pub fn planned(&self) -> usize {
        self.entries.len() * self.strategies.len() * self.models.len() * self.config.repetitions as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub planned: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    /// Completed records stored without scores (no scorers were given).
    pub unscored: usize,
}

impl RunSummary {
    pub fn new_records(&self) -> usize {
        self.completed + self.failed
    }
}

struct Job<'a> {
    model: &'a str,
    spec: &'a CascadeSpec,
    run_index: u32,
    entry: &'a PersonaEntry,
}

/// Scores one final response. An empty response yields all-missing scores.
pub fn score_final_response(response: &str, scorers: Scorers<'_>) -> MetricScores {
    score_response(response, scorers).unwrap_or_else(|e| {
        let missing = || MetricValue::Missing {
            reason: e.to_string(),
            unavailable: false,
        };
        MetricScores {
            eq: missing(),
            regard: missing(),
            perplexity: missing(),
            scorers: Vec::new(),
        }
    })
}

/// Executes every missing (entry, strategy, model, run) tuple and appends a
/// record for each. Runs up to `config.concurrency` cascades at once.
pub fn run_experiment(
    experiment: &Experiment<'_>,
    clients: &dyn ClientFactory,
    scorers: Option<Scorers<'_>>,
    store: &RunStore,
) -> Result<RunSummary, RunnerError> {
    experiment.validate()?;
    let existing = store.keys()?;

    let mut jobs = Vec::new();
    let mut skipped = 0;
    for model in experiment.models {
        for spec in experiment.strategies {
            for run_index in 1..=experiment.config.repetitions {
                for entry in experiment.entries {
                    let key = RecordKey {
                        model_name: model.clone(),
                        strategy_name: spec.strategy_name.clone(),
                        run_index,
                        entry_id: entry.id.clone(),
                    };
                    if existing.contains(&key) {
                        skipped += 1;
                    } else {
                        jobs.push(Job {
                            model,
                            spec,
                            run_index,
                            entry,
                        });
                    }
                }
            }
        }
    }
    info!(
        "{} records planned, {} already in store, {} to run",
        experiment.planned(),
        skipped,
        jobs.len()
    );

    let next = AtomicUsize::new(0);
    let completed = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let unscored = AtomicUsize::new(0);
    let first_error: Mutex<Option<StoreError>> = Mutex::new(None);
    let workers = experiment.config.concurrency.min(jobs.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if first_error.lock().unwrap_or_else(|e| e.into_inner()).is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { return };
                let record = execute(job, experiment.config, clients, scorers);
                match &record.outcome {
                    RecordOutcome::Completed { .. } => {
                        completed.fetch_add(1, Ordering::SeqCst);
                        if record.scores.is_none() {
                            unscored.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                    RecordOutcome::Failed { error, .. } => {
                        warn!(
                            "{} / {} / run {} / {}: {error}",
                            job.model, job.spec.strategy_name, job.run_index, job.entry.id
                        );
                        failed.fetch_add(1, Ordering::SeqCst);
                    }
                }
                if let Err(e) = store.append(&record) {
                    first_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                    return;
                }
            });
        }
    });
    store.flush()?;
    if let Some(e) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e.into());
    }

    Ok(RunSummary {
        planned: experiment.planned(),
        skipped,
        completed: completed.into_inner(),
        failed: failed.into_inner(),
        unscored: unscored.into_inner(),
    })
}

fn execute(job: &Job<'_>, config: &RunConfig, clients: &dyn ClientFactory, scorers: Option<Scorers<'_>>) -> RunRecord {
    let started_at = Utc::now();
    let config = config.for_model(job.model);
    let client = clients.client(job.model, job.run_index);
    debug!(
        "running {} / {} / run {} / {}",
        job.model, job.spec.strategy_name, job.run_index, job.entry.id
    );
    let (outcome, scores) = match run_cascade(job.spec, job.entry, client.as_ref(), &config, job.run_index) {
        Ok(result) => {
            let scores = scorers.map(|s| score_final_response(&result.final_response, s));
            (RecordOutcome::Completed { result }, scores)
        }
        Err(e) => {
            let stage_index = e.stage_index();
            let completed = e.completed().to_vec();
            let error = match &e {
                RunCascadeError::Stage { .. } => e.to_string(),
                RunCascadeError::Render(r) => format!("render: {r}"),
            };
            (
                RecordOutcome::Failed {
                    error,
                    stage_index,
                    completed,
                },
                None,
            )
        }
    };
    RunRecord {
        entry_id: job.entry.id.clone(),
        strategy_name: job.spec.strategy_name.clone(),
        model_name: job.model.to_string(),
        run_index: job.run_index,
        outcome,
        scores,
        config,
        started_at,
        finished_at: Utc::now(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BackfillSummary {
    pub scored: usize,
    pub already_scored: usize,
}

#[derive(Debug, Error)]
pub enum BackfillError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Scores completed records that have no scores yet (or whose scorer was
/// unreachable). If any scorer is unreachable nothing is written.
pub fn backfill_scores(store: &RunStore, scorers: Scorers<'_>) -> Result<BackfillSummary, BackfillError> {
    let mut records = store.load()?;
    let mut summary = BackfillSummary::default();
    for r in records.iter_mut() {
        if !r.needs_scoring() {
            if r.is_completed() {
                summary.already_scored += 1;
            }
            continue;
        }
        let response = r.final_response().unwrap_or_default().to_string();
        let scores = score_final_response(&response, scorers);
        if let Some(reason) = scores.unavailable_reasons().into_iter().next() {
            return Err(BackfillError::Unavailable(reason));
        }
        r.scores = Some(scores);
        summary.scored += 1;
    }
    if summary.scored > 0 {
        store.rewrite(&records)?;
    }
    Ok(summary)
}

/// Recomputes the per-run dataset means stored in the manifest, if one exists.
pub fn refresh_run_means(store: &RunStore) -> Result<(), StoreError> {
    if let Some(mut manifest) = store.read_manifest()? {
        manifest.run_means = run_means(&store.load()?);
        store.write_manifest(&manifest)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
