use sha2::{Digest, Sha256};

use super::{
    EntailmentScorer, EntailmentScores, LogProbScorer, ScorerError, SentimentDistribution, SentimentScorer,
    TokenLogProbSummary,
};
use crate::scalar::Scalar;

/// Deterministic scorer deriving every probability from a keyed SHA-256 of
/// the input. Scores carry no linguistic meaning; they exist so that the
/// whole pipeline can run offline and reproducibly.
#[derive(Debug, Clone)]
pub struct HashScorer {
    key: u64,
}

impl HashScorer {
    pub fn new(key: u64) -> Self {
        Self { key }
    }

    fn unit(&self, parts: &[&str]) -> f64 {
        let mut h = Sha256::new();
        h.update(self.key.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        // 53 high bits -> [0, 1)
        (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Default for HashScorer {
    fn default() -> Self {
        Self::new(0)
    }
}

fn non_empty(text: &str) -> Result<(), ScorerError> {
    if text.trim().is_empty() {
        Err(ScorerError::Rejected("empty text".into()))
    } else {
        Ok(())
    }
}

impl<F: Scalar> EntailmentScorer<F> for HashScorer {
    fn name(&self) -> &str {
        "hash-fake"
    }

    fn entailment(&self, text: &str, hypotheses: &[&str]) -> Result<EntailmentScores<F>, ScorerError> {
        non_empty(text)?;
        if hypotheses.is_empty() {
            return Err(ScorerError::Rejected("no hypotheses".into()));
        }
        let probs = hypotheses
            .iter()
            .map(|h| F::from_f64_lossy(self.unit(&["entailment", text, h])))
            .collect();
        EntailmentScores::new(probs)
    }
}

impl<F: Scalar> SentimentScorer<F> for HashScorer {
    fn name(&self) -> &str {
        "hash-fake"
    }

    fn sentiment(&self, text: &str) -> Result<SentimentDistribution<F>, ScorerError> {
        non_empty(text)?;
        let raw = [
            self.unit(&["sentiment", "positive", text]) + 0.01,
            self.unit(&["sentiment", "neutral", text]) + 0.01,
            self.unit(&["sentiment", "negative", text]) + 0.01,
        ];
        let total: f64 = raw.iter().sum();
        let pos = raw[0] / total;
        let neg = raw[2] / total;
        let neu = 1.0 - pos - neg;
        SentimentDistribution::new(
            F::from_f64_lossy(pos),
            F::from_f64_lossy(neu.max(0.0)),
            F::from_f64_lossy(neg),
        )
    }
}

impl<F: Scalar> LogProbScorer<F> for HashScorer {
    fn name(&self) -> &str {
        "hash-fake"
    }

    /// Whitespace words stand in for tokens.
    fn logprobs(&self, text: &str) -> Result<TokenLogProbSummary<F>, ScorerError> {
        non_empty(text)?;
        let tokens = text.split_whitespace().count();
        let mean = -(0.5 + 3.5 * self.unit(&["logprobs", text]));
        TokenLogProbSummary::new(tokens, F::from_f64_lossy(mean))
    }
}
