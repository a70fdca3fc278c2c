//! Batch harness for multi-stage empathetic prompt cascades.
//!
//! - [`dataset`]: persona dataset files (CSV / JSONL) and validation.
//! - [`cascade`]: strategies and the staged prompt-nesting executor.
//! - [`llm`]: chat-completion backends (OpenAI-compatible HTTP, mock, retry).
//! - [`metrics`]: Empathy Quotient, Regard and Perplexity over pluggable scorers.
//! - [`runner`]: experiment orchestration, run store, aggregation, reports.
//! - [`cli`]: the `cascade-eval` command.
//!
//! Metric formulas and aggregation are generic over [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below fix the scalar for the common case.

pub mod cascade;
pub mod cli;
pub mod dataset;
pub mod llm;
pub mod metrics;
pub mod runner;
pub mod scalar;
pub mod stats;

pub use cascade::{builtin_strategy, render_stage_prompt, run_cascade, CascadeResult, CascadeSpec, StageTranscript};
pub use dataset::{load_dataset, validate_dataset, PersonaEntry};
pub use llm::{ChatBackend, ChatRequest, ChatResponse, MockBackend, RunConfig};
pub use runner::{aggregate, render_report, run_experiment, AggregateResult, RunRecord, RunStore};

pub type SentimentDistribution = metrics::SentimentDistribution<f64>;
pub type EntailmentScores = metrics::EntailmentScores<f64>;
pub type TokenLogProbSummary = metrics::TokenLogProbSummary<f64>;
pub type MetricScores = metrics::MetricScores<f64>;
pub type MetricValue = metrics::MetricValue<f64>;
pub type Summary = stats::Summary<f64>;

pub type SentimentDistributionF32 = metrics::SentimentDistribution<f32>;
pub type EntailmentScoresF32 = metrics::EntailmentScores<f32>;
pub type TokenLogProbSummaryF32 = metrics::TokenLogProbSummary<f32>;
pub type MetricScoresF32 = metrics::MetricScores<f32>;
pub type SummaryF32 = stats::Summary<f32>;
