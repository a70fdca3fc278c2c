use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    perplexity_of, EntailmentScorer, EntailmentScores, LogProbScorer, ScorerError, SentimentDistribution,
    SentimentScorer, TokenLogProbSummary,
};
use crate::scalar::Scalar;

/// Consistency tolerance between the service's own perplexity and ours.
pub const SELFTEST_TOLERANCE: f64 = 1e-4;

/// HTTP client for the scoring service.
///
/// Endpoints: `POST /entailment`, `POST /sentiment`, `POST /logprobs`,
/// `GET /healthz` and `GET /selftest`, all JSON.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    base_url: String,
    client: Client,
}

#[derive(Serialize)]
struct EntailmentRequest<'a> {
    text: &'a str,
    hypotheses: &'a [&'a str],
}

#[derive(Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EntailmentResponse {
    probabilities: Vec<f64>,
}

#[derive(Deserialize)]
struct SentimentResponse {
    positive: f64,
    neutral: f64,
    negative: f64,
}

#[derive(Deserialize)]
struct LogProbResponse {
    token_count: usize,
    mean_log_prob: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct SelfTestResponse {
    text: String,
    token_count: usize,
    mean_log_prob: f64,
    perplexity: f64,
}

/// Result of comparing the service's perplexity with the local formula.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    pub text: String,
    pub service_perplexity: f64,
    pub local_perplexity: f64,
    pub abs_diff: f64,
    pub passed: bool,
}

impl RemoteScorer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, ScorerError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn health(&self) -> Result<(), ScorerError> {
        let resp = self
            .client
            .get(format!("{}/healthz", self.base_url))
            .send()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ScorerError::Unavailable(format!(
                "health check returned {}",
                resp.status()
            )))
        }
    }

    /// Checks that `exp(-mean_log_prob)` reported by the service agrees with
    /// its own perplexity to [`SELFTEST_TOLERANCE`].
    pub fn selftest(&self) -> Result<SelfTestReport, ScorerError> {
        let resp = self
            .client
            .get(format!("{}/selftest", self.base_url))
            .send()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        let body: SelfTestResponse = decode(resp)?;
        let summary = TokenLogProbSummary::new(body.token_count, body.mean_log_prob)?;
        let local = perplexity_of(&summary)
            .ok_or_else(|| ScorerError::InvalidOutput("selftest text has fewer than 2 tokens".into()))?;
        let abs_diff = (local - body.perplexity).abs();
        Ok(SelfTestReport {
            text: body.text,
            service_perplexity: body.perplexity,
            local_perplexity: local,
            abs_diff,
            passed: abs_diff <= SELFTEST_TOLERANCE,
        })
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ScorerError> {
        let resp = self
            .client
            .post(format!("{}/{path}", self.base_url))
            .json(body)
            .send()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        decode(resp)
    }
}

fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, ScorerError> {
    let status = resp.status();
    if status.is_success() {
        return resp.json().map_err(|e| ScorerError::InvalidOutput(e.to_string()));
    }
    let body = resp.text().unwrap_or_default();
    match status {
        StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY => {
            Err(ScorerError::Rejected(format!("{status}: {body}")))
        }
        StatusCode::SERVICE_UNAVAILABLE | StatusCode::BAD_GATEWAY | StatusCode::GATEWAY_TIMEOUT => {
            Err(ScorerError::Unavailable(format!("{status}: {body}")))
        }
        _ => Err(ScorerError::InvalidOutput(format!("{status}: {body}"))),
    }
}

impl<F: Scalar> EntailmentScorer<F> for RemoteScorer {
    fn name(&self) -> &str {
        "remote"
    }

    fn entailment(&self, text: &str, hypotheses: &[&str]) -> Result<EntailmentScores<F>, ScorerError> {
        let r: EntailmentResponse = self.post("entailment", &EntailmentRequest { text, hypotheses })?;
        if r.probabilities.len() != hypotheses.len() {
            return Err(ScorerError::InvalidOutput(format!(
                "{} hypotheses sent, {} probabilities returned",
                hypotheses.len(),
                r.probabilities.len()
            )));
        }
        EntailmentScores::new(r.probabilities.into_iter().map(F::from_f64_lossy).collect())
    }
}

impl<F: Scalar> SentimentScorer<F> for RemoteScorer {
    fn name(&self) -> &str {
        "remote"
    }

    fn sentiment(&self, text: &str) -> Result<SentimentDistribution<F>, ScorerError> {
        let r: SentimentResponse = self.post("sentiment", &TextRequest { text })?;
        SentimentDistribution::new(
            F::from_f64_lossy(r.positive),
            F::from_f64_lossy(r.neutral),
            F::from_f64_lossy(r.negative),
        )
    }
}

impl<F: Scalar> LogProbScorer<F> for RemoteScorer {
    fn name(&self) -> &str {
        "remote"
    }

    /// A 400 from the service means the text has fewer than two tokens; that
    /// is reported as a one-token summary so perplexity comes out undefined.
    fn logprobs(&self, text: &str) -> Result<TokenLogProbSummary<F>, ScorerError> {
        match self.post::<_, LogProbResponse>("logprobs", &TextRequest { text }) {
            Ok(r) => TokenLogProbSummary::new(r.token_count, F::from_f64_lossy(r.mean_log_prob)),
            Err(ScorerError::Rejected(_)) if !text.trim().is_empty() => TokenLogProbSummary::new(1, F::zero()),
            Err(e) => Err(e),
        }
    }
}
