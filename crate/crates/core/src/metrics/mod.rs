//! Empathy Quotient, Regard and Perplexity.
//!
//! The formulas are pure functions of scorer outputs and are generic over the
//! scalar type. Scorers are pluggable through three capability traits:
//! [`EntailmentScorer`], [`SentimentScorer`] and [`LogProbScorer`]. The remote
//! HTTP client and the deterministic hash-based fake both implement all three.

mod fake;
mod remote;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use fake::HashScorer;
pub use remote::{RemoteScorer, SelfTestReport};

/// Hypotheses scored for entailment against every response, in order:
/// emotional acknowledgment, perspective-taking, constructive advice.
pub const EMPATHY_HYPOTHESES: [&str; 3] = [
    "This response acknowledges the user's emotions.",
    "This response demonstrates understanding of the user's perspective.",
    "This response provides constructive and empathetic advice.",
];

/// Tolerance on the sum of a sentiment distribution.
pub const SENTIMENT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("scorer rejected input: {0}")]
    Rejected(String),
    #[error("scorer returned invalid output: {0}")]
    InvalidOutput(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("response is empty")]
    EmptyResponse,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// One of the three reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Eq,
    Regard,
    Perplexity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Eq, Metric::Regard, Metric::Perplexity];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Perplexity)
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Eq => "Empathy Quotient",
            Metric::Regard => "Regard",
            Metric::Perplexity => "Perplexity",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Eq => "eq",
            Metric::Regard => "regard",
            Metric::Perplexity => "perplexity",
        };
        f.write_str(s)
    }
}

/// Three-class sentiment probabilities. Each in `[0, 1]`, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentDistribution<F = f64> {
    pub p_positive: F,
    pub p_neutral: F,
    pub p_negative: F,
}

impl<F: Scalar> SentimentDistribution<F> {
    pub fn new(p_positive: F, p_neutral: F, p_negative: F) -> Result<Self, ScorerError> {
        let d = Self {
            p_positive,
            p_neutral,
            p_negative,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        for p in [self.p_positive, self.p_neutral, self.p_negative] {
            if !unit_interval(p) {
                return Err(ScorerError::InvalidOutput(format!(
                    "sentiment probability {p} outside [0, 1]"
                )));
            }
        }
        let sum = (self.p_positive + self.p_neutral + self.p_negative).to_f64_lossy();
        // f32 distributions carry their own rounding on top of the tolerance.
        let tol = SENTIMENT_SUM_TOLERANCE.max(4.0 * F::epsilon().to_f64_lossy());
        if (sum - 1.0).abs() > tol {
            return Err(ScorerError::InvalidOutput(format!(
                "sentiment probabilities sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// Entailment probability per hypothesis, in hypothesis order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScores<F = f64>(Vec<F>);

impl<F: Scalar> EntailmentScores<F> {
    pub fn new(probabilities: Vec<F>) -> Result<Self, ScorerError> {
        if let Some(p) = probabilities.iter().find(|p| !unit_interval(**p)) {
            return Err(ScorerError::InvalidOutput(format!(
                "entailment probability {p} outside [0, 1]"
            )));
        }
        Ok(Self(probabilities))
    }

    pub fn probabilities(&self) -> &[F] {
        &self.0
    }
}

/// Token count and mean natural-log next-token probability of a text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbSummary<F = f64> {
    pub token_count: usize,
    pub mean_log_prob: F,
}

impl<F: Scalar> TokenLogProbSummary<F> {
    pub fn new(token_count: usize, mean_log_prob: F) -> Result<Self, ScorerError> {
        if token_count == 0 {
            return Err(ScorerError::InvalidOutput("token count is zero".into()));
        }
        if mean_log_prob.is_nan() || mean_log_prob > F::zero() {
            return Err(ScorerError::InvalidOutput(format!(
                "mean log probability {mean_log_prob} is not <= 0"
            )));
        }
        Ok(Self {
            token_count,
            mean_log_prob,
        })
    }
}

pub trait EntailmentScorer<F: Scalar = f64>: Send + Sync {
    fn name(&self) -> &str;
    /// Probability that each hypothesis is entailed by `text`, scored independently.
    fn entailment(&self, text: &str, hypotheses: &[&str]) -> Result<EntailmentScores<F>, ScorerError>;
}

pub trait SentimentScorer<F: Scalar = f64>: Send + Sync {
    fn name(&self) -> &str;
    /// Full three-class distribution, never only the top label.
    fn sentiment(&self, text: &str) -> Result<SentimentDistribution<F>, ScorerError>;
}

pub trait LogProbScorer<F: Scalar = f64>: Send + Sync {
    fn name(&self) -> &str;
    fn logprobs(&self, text: &str) -> Result<TokenLogProbSummary<F>, ScorerError>;
}

/// The three scorer capabilities used by [`score_response`].
#[derive(Clone, Copy)]
pub struct Scorers<'a, F: Scalar = f64> {
    pub entailment: &'a dyn EntailmentScorer<F>,
    pub sentiment: &'a dyn SentimentScorer<F>,
    pub logprobs: &'a dyn LogProbScorer<F>,
}

impl<'a, F: Scalar> Scorers<'a, F> {
    /// All three capabilities served by one backend.
    pub fn uniform<S>(scorer: &'a S) -> Self
    where
        S: EntailmentScorer<F> + SentimentScorer<F> + LogProbScorer<F>,
    {
        Self {
            entailment: scorer,
            sentiment: scorer,
            logprobs: scorer,
        }
    }
}

/// Arithmetic mean of the entailment probabilities, unweighted.
pub fn mean_entailment<F: Scalar>(scores: &EntailmentScores<F>) -> F {
    let p = scores.probabilities();
    let sum = p.iter().fold(F::zero(), |acc, &x| acc + x);
    sum / F::from_count(p.len())
}

/// `P(positive) - P(negative)`; the neutral class carries zero weight.
pub fn regard_of<F: Scalar>(d: &SentimentDistribution<F>) -> F {
    d.p_positive - d.p_negative
}

/// `exp(-mean_log_prob)`, or `None` when fewer than two tokens were seen
/// (a next-token model scores no position of a one-token text).
pub fn perplexity_of<F: Scalar>(summary: &TokenLogProbSummary<F>) -> Option<F> {
    if summary.token_count < 2 {
        return None;
    }
    Some((-summary.mean_log_prob).exp())
}

pub fn empathy_quotient<F: Scalar>(response: &str, scorer: &dyn EntailmentScorer<F>) -> Result<F, MetricError> {
    ensure_non_empty(response)?;
    let scores = scorer.entailment(response, &EMPATHY_HYPOTHESES)?;
    if scores.probabilities().len() != EMPATHY_HYPOTHESES.len() {
        return Err(ScorerError::InvalidOutput(format!(
            "expected {} entailment probabilities, got {}",
            EMPATHY_HYPOTHESES.len(),
            scores.probabilities().len()
        ))
        .into());
    }
    Ok(mean_entailment(&scores))
}

pub fn regard<F: Scalar>(response: &str, scorer: &dyn SentimentScorer<F>) -> Result<F, MetricError> {
    ensure_non_empty(response)?;
    let d = scorer.sentiment(response)?;
    d.validate()?;
    Ok(regard_of(&d))
}

pub fn perplexity<F: Scalar>(response: &str, scorer: &dyn LogProbScorer<F>) -> Result<Option<F>, MetricError> {
    ensure_non_empty(response)?;
    let summary = scorer.logprobs(response)?;
    Ok(perplexity_of(&summary))
}

fn ensure_non_empty(response: &str) -> Result<(), MetricError> {
    if response.trim().is_empty() {
        Err(MetricError::EmptyResponse)
    } else {
        Ok(())
    }
}

fn unit_interval<F: Scalar>(p: F) -> bool {
    p >= F::zero() && p <= F::one()
}

/// A metric cell for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricValue<F = f64> {
    Ok {
        value: F,
    },
    /// The metric has no value for this response (perplexity of a 1-token text).
    Undefined,
    /// The scorer failed; excluded from aggregation. `unavailable` is set when
    /// the scorer could not be reached at all.
    Missing {
        reason: String,
        #[serde(default)]
        unavailable: bool,
    },
}

impl<F: Scalar> MetricValue<F> {
    pub fn value(&self) -> Option<F> {
        match self {
            MetricValue::Ok { value } => Some(*value),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, MetricValue::Missing { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerTiming {
    pub metric: Metric,
    pub scorer: String,
    pub elapsed_ms: f64,
}

/// EQ, Regard and Perplexity for one final response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores<F = f64> {
    pub eq: MetricValue<F>,
    pub regard: MetricValue<F>,
    pub perplexity: MetricValue<F>,
    #[serde(default)]
    pub scorers: Vec<ScorerTiming>,
}

impl<F: Scalar> MetricScores<F> {
    pub fn get(&self, metric: Metric) -> &MetricValue<F> {
        match metric {
            Metric::Eq => &self.eq,
            Metric::Regard => &self.regard,
            Metric::Perplexity => &self.perplexity,
        }
    }

    /// Errors from a metric whose scorer could not be reached at all.
    pub fn unavailable_reasons(&self) -> Vec<String> {
        Metric::ALL
            .iter()
            .filter_map(|m| match self.get(*m) {
                MetricValue::Missing {
                    reason,
                    unavailable: true,
                } => Some(format!("{m}: {reason}")),
                _ => None,
            })
            .collect()
    }

    /// Zeroes scorer timings so that otherwise identical scores compare equal.
    pub fn without_timings(&self) -> Self {
        let mut s = self.clone();
        for t in &mut s.scorers {
            t.elapsed_ms = 0.0;
        }
        s
    }
}

/// Scores one response with all three metrics.
///
/// Only an empty response is an error. A failing scorer marks its own metric
/// missing and leaves the other two intact.
pub fn score_response<F: Scalar>(response: &str, scorers: Scorers<'_, F>) -> Result<MetricScores<F>, MetricError> {
    ensure_non_empty(response)?;
    let mut timings = Vec::with_capacity(3);

    let start = Instant::now();
    let eq = empathy_quotient(response, scorers.entailment);
    timings.push(timing(Metric::Eq, scorers.entailment.name(), start));

    let start = Instant::now();
    let rg = regard(response, scorers.sentiment);
    timings.push(timing(Metric::Regard, scorers.sentiment.name(), start));

    let start = Instant::now();
    let ppl = perplexity(response, scorers.logprobs);
    timings.push(timing(Metric::Perplexity, scorers.logprobs.name(), start));

    Ok(MetricScores {
        eq: into_value(eq.map(Some)),
        regard: into_value(rg.map(Some)),
        perplexity: into_value(ppl),
        scorers: timings,
    })
}

fn timing(metric: Metric, scorer: &str, start: Instant) -> ScorerTiming {
    ScorerTiming {
        metric,
        scorer: scorer.to_string(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn into_value<F: Scalar>(result: Result<Option<F>, MetricError>) -> MetricValue<F> {
    match result {
        Ok(Some(value)) => MetricValue::Ok { value },
        Ok(None) => MetricValue::Undefined,
        Err(e) => MetricValue::Missing {
            unavailable: matches!(e, MetricError::Scorer(ScorerError::Unavailable(_))),
            reason: e.to_string(),
        },
    }
}
