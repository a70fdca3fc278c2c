use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::cascade::{builtin_strategy, BUILTIN_STRATEGIES, ECN};
use crate::llm::{ChatRequest, ChatResponse, CountingBackend, LlmError, MockBackend};
use crate::metrics::{
    EntailmentScorer, EntailmentScores, HashScorer, LogProbScorer, Metric, ScorerError, SentimentDistribution,
    SentimentScorer, TokenLogProbSummary,
};

fn entries(n: usize) -> Vec<PersonaEntry> {
    (1..=n)
        .map(|i| PersonaEntry {
            id: format!("p{i:02}"),
            demographics: format!("person {i}"),
            difficulties: "finding work".into(),
            query: "How do I start?".into(),
        })
        .collect()
}

fn all_strategies() -> Vec<CascadeSpec> {
    BUILTIN_STRATEGIES
        .iter()
        .map(|s| builtin_strategy(s).unwrap())
        .collect()
}

fn mock_factory(seed: u64) -> impl Fn(&str, u32) -> Arc<dyn ChatBackend> + Sync {
    move |_: &str, run: u32| Arc::new(MockBackend::new(MockBackend::derive_seed(seed, run))) as Arc<dyn ChatBackend>
}

fn config(reps: u32) -> RunConfig {
    RunConfig {
        repetitions: reps,
        ..RunConfig::default()
    }
}

#[test]
fn full_grid_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    let e = entries(10);
    let s = all_strategies();
    let models = vec!["mock-model".to_string()];
    let cfg = config(10);
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &models,
        config: &cfg,
    };
    let scorer = HashScorer::new(1);
    let summary = run_experiment(&exp, &mock_factory(7), Some(Scorers::uniform(&scorer)), &store).unwrap();
    assert_eq!(summary.completed, 400);
    assert_eq!(summary.failed, 0);
    assert_eq!(store.load().unwrap().len(), 400);
    let hash = content_hash(&store.load().unwrap());

    let again = run_experiment(&exp, &mock_factory(7), Some(Scorers::uniform(&scorer)), &store).unwrap();
    assert_eq!(again.new_records(), 0);
    assert_eq!(again.skipped, 400);
    assert_eq!(content_hash(&store.load().unwrap()), hash);
}

#[test]
fn ecn_record_has_four_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    let e = entries(1);
    let s = vec![builtin_strategy(ECN).unwrap()];
    let models = vec!["m".to_string()];
    let cfg = config(1);
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &models,
        config: &cfg,
    };
    run_experiment(&exp, &mock_factory(1), None, &store).unwrap();
    let records = store.load().unwrap();
    assert_eq!(records.len(), 1);
    match &records[0].outcome {
        RecordOutcome::Completed { result } => assert_eq!(result.transcripts.len(), 4),
        other => panic!("unexpected {other:?}"),
    }
    assert!(records[0].scores.is_none());
}

#[test]
fn repetitions_resample() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    let e = entries(1);
    let s = vec![builtin_strategy("standard").unwrap()];
    let models = vec!["m".to_string()];
    let cfg = config(2);
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &models,
        config: &cfg,
    };
    run_experiment(&exp, &mock_factory(1), None, &store).unwrap();
    let r = store.load().unwrap();
    assert_ne!(r[0].final_response(), r[1].final_response());
}

/// Fails every request whose prompt mentions one entry.
struct FailFor(&'static str);

impl ChatBackend for FailFor {
    fn name(&self) -> &str {
        "fail-for"
    }
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if req.user_message.contains(self.0) {
            Err(LlmError::Auth {
                status: 401,
                body: "denied".into(),
            })
        } else {
            Ok(ChatResponse {
                text: "Fine answer here.".into(),
                finish_reason: crate::llm::FinishReason::Stop,
                usage: None,
                latency: Duration::ZERO,
                attempts: 1,
            })
        }
    }
}

#[test]
fn failures_are_recorded_and_conserved() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    let e = entries(3);
    let s = all_strategies();
    let models = vec!["m".to_string()];
    let cfg = config(2);
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &models,
        config: &cfg,
    };
    let factory = |_: &str, _: u32| Arc::new(FailFor("person 2")) as Arc<dyn ChatBackend>;
    let scorer = HashScorer::new(0);
    let summary = run_experiment(&exp, &factory, Some(Scorers::uniform(&scorer)), &store).unwrap();
    assert_eq!(summary.failed, 4 * 2);
    assert_eq!(summary.completed + summary.failed, 3 * 4 * 2);
    let records = store.load().unwrap();
    let failed: Vec<_> = records.iter().filter(|r| !r.is_completed()).collect();
    assert!(failed.iter().all(|r| r.entry_id == "p02" && r.scores.is_none()));
    if let RecordOutcome::Failed { stage_index, .. } = &failed[0].outcome {
        assert_eq!(*stage_index, Some(1));
    }

    // Failed records never contribute to aggregates.
    let aggs = aggregate(&records, Reduction::Pooled).unwrap();
    assert!(aggs.iter().all(|a| a.eq.unwrap().n == 2 * 2));
}

#[test]
fn call_counts_per_strategy() {
    let e = entries(3);
    let models = vec!["m".to_string()];
    let cfg = config(2);
    for name in BUILTIN_STRATEGIES {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path().join("runs.jsonl"));
        let s = vec![builtin_strategy(name).unwrap()];
        let counter = Arc::new(CountingBackend::new(MockBackend::new(3)));
        let c = counter.clone();
        let factory = move |_: &str, _: u32| c.clone() as Arc<dyn ChatBackend>;
        let exp = Experiment {
            entries: &e,
            strategies: &s,
            models: &models,
            config: &cfg,
        };
        run_experiment(&exp, &factory, None, &store).unwrap();
        assert_eq!(counter.calls(), s[0].stage_count() * 3 * 2, "{name}");
    }
}

#[test]
fn invalid_inputs_rejected_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    let mut e = entries(2);
    e[1].id = e[0].id.clone();
    let s = all_strategies();
    let models = vec!["m".to_string()];
    let cfg = config(1);
    let counter = Arc::new(CountingBackend::new(MockBackend::new(3)));
    let c = counter.clone();
    let factory = move |_: &str, _: u32| c.clone() as Arc<dyn ChatBackend>;
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &models,
        config: &cfg,
    };
    assert!(matches!(
        run_experiment(&exp, &factory, None, &store),
        Err(RunnerError::InvalidDataset(_))
    ));
    let e = entries(2);
    let no_models: Vec<String> = vec![];
    let exp = Experiment {
        entries: &e,
        strategies: &s,
        models: &no_models,
        config: &cfg,
    };
    assert!(matches!(
        run_experiment(&exp, &factory, None, &store),
        Err(RunnerError::NoModels)
    ));
    assert_eq!(counter.calls(), 0);
}

/// Entailment fixed to one value per response text, for aggregation tests.
struct ByText(Vec<(&'static str, f64)>);

impl ByText {
    fn value(&self, text: &str) -> f64 {
        self.0.iter().find(|(t, _)| *t == text).map(|(_, v)| *v).unwrap()
    }
}

impl EntailmentScorer for ByText {
    fn name(&self) -> &str {
        "by-text"
    }
    fn entailment(&self, text: &str, h: &[&str]) -> Result<EntailmentScores, ScorerError> {
        EntailmentScores::new(vec![self.value(text); h.len()])
    }
}

impl SentimentScorer for ByText {
    fn name(&self) -> &str {
        "by-text"
    }
    fn sentiment(&self, _: &str) -> Result<SentimentDistribution, ScorerError> {
        Err(ScorerError::InvalidOutput("no sentiment".into()))
    }
}

impl LogProbScorer for ByText {
    fn name(&self) -> &str {
        "by-text"
    }
    fn logprobs(&self, text: &str) -> Result<TokenLogProbSummary, ScorerError> {
        TokenLogProbSummary::new(5, -self.value(text))
    }
}

fn scored_record(entry: &str, run: u32, text: &str, scorer: &ByText) -> RunRecord {
    let mut r = store_record(entry, run, text);
    r.scores = Some(score_final_response(text, Scorers::uniform(scorer)));
    r
}

fn store_record(entry: &str, run: u32, text: &str) -> RunRecord {
    use crate::cascade::CascadeResult;
    RunRecord {
        entry_id: entry.into(),
        strategy_name: "standard".into(),
        model_name: "m".into(),
        run_index: run,
        outcome: RecordOutcome::Completed {
            result: CascadeResult {
                entry_id: entry.into(),
                strategy_name: "standard".into(),
                model_name: "m".into(),
                run_index: run,
                transcripts: vec![],
                final_response: text.into(),
            },
        },
        scores: None,
        config: RunConfig::default(),
        started_at: Utc::now(),
        finished_at: Utc::now(),
    }
}

#[test]
fn aggregate_textbook_and_missing_metric() {
    let scorer = ByText(vec![("a", 0.25), ("b", 0.5), ("c", 0.75)]);
    let records = vec![
        scored_record("e1", 1, "a", &scorer),
        scored_record("e2", 1, "b", &scorer),
        scored_record("e3", 1, "c", &scorer),
    ];
    let aggs = aggregate(&records, Reduction::Pooled).unwrap();
    assert_eq!(aggs.len(), 1);
    let eq = aggs[0].eq.unwrap();
    assert_eq!((eq.mean, eq.std, eq.n), (0.5, 0.25, 3));
    // Regard failed everywhere: missing cell, not zeros.
    assert!(aggs[0].regard.is_none());
    assert!(aggs[0].get(Metric::Perplexity).is_some());
}

#[test]
fn run_means_reduction() {
    // Run 1 scores {0.25, 0.75} (mean .5); run 2 {0.5, 1.0} (mean .75).
    let scorer = ByText(vec![("a", 0.25), ("b", 0.75), ("c", 0.5), ("d", 1.0)]);
    let records = vec![
        scored_record("e1", 1, "a", &scorer),
        scored_record("e2", 1, "b", &scorer),
        scored_record("e1", 2, "c", &scorer),
        scored_record("e2", 2, "d", &scorer),
    ];
    let agg = &aggregate(&records, Reduction::RunMeans).unwrap()[0];
    let eq = agg.eq.unwrap();
    assert_eq!(eq.n, 2);
    assert_eq!(eq.mean, 0.625);
    assert!((eq.std - (0.125f64 * 0.125 * 2.0).sqrt()).abs() < 1e-15);

    let means = run_means(&records);
    assert_eq!(means.len(), 2);
    assert_eq!(means[0].eq, Some(0.5));
    assert_eq!(means[1].eq, Some(0.75));
    assert_eq!(means[0].regard, None);
}

#[test]
fn aggregate_empty_store() {
    assert_eq!(aggregate(&[], Reduction::Pooled), Err(AggregateError::EmptyStore));
}

struct Down;

impl EntailmentScorer for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn entailment(&self, _: &str, _: &[&str]) -> Result<EntailmentScores, ScorerError> {
        Err(ScorerError::Unavailable("connection refused".into()))
    }
}
impl SentimentScorer for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn sentiment(&self, _: &str) -> Result<SentimentDistribution, ScorerError> {
        Err(ScorerError::Unavailable("connection refused".into()))
    }
}
impl LogProbScorer for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn logprobs(&self, _: &str) -> Result<TokenLogProbSummary, ScorerError> {
        Err(ScorerError::Unavailable("connection refused".into()))
    }
}

#[test]
fn backfill_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    for i in 0..5 {
        store
            .append(&store_record(&format!("e{i}"), 1, "Some answer text."))
            .unwrap();
    }
    let before = std::fs::read(store.path()).unwrap();
    assert!(matches!(
        backfill_scores(&store, Scorers::uniform(&Down)),
        Err(BackfillError::Unavailable(_))
    ));
    assert_eq!(std::fs::read(store.path()).unwrap(), before);

    let scorer = HashScorer::new(2);
    let s = backfill_scores(&store, Scorers::uniform(&scorer)).unwrap();
    assert_eq!(s.scored, 5);
    assert!(store.load().unwrap().iter().all(|r| !r.needs_scoring()));

    let s = backfill_scores(&store, Scorers::uniform(&scorer)).unwrap();
    assert_eq!(
        s,
        BackfillSummary {
            scored: 0,
            already_scored: 5
        }
    );
}
