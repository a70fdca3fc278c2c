use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, ChatResponse, FinishReason, LlmError, TokenUsage};

const OPENERS: &[&str] = &[
    "It sounds like",
    "I can imagine that",
    "It makes sense that",
    "Many people find that",
    "It is understandable that",
    "From what you describe,",
];
const SUBJECTS: &[&str] = &[
    "this situation",
    "the daily routine",
    "balancing work and family",
    "feeling unheard at work",
    "navigating a new community",
    "the pressure to prove yourself",
    "finding the right support",
];
const VERBS: &[&str] = &[
    "can feel exhausting",
    "brings both hope and frustration",
    "takes real courage",
    "shapes how you see opportunities",
    "deserves patience and care",
    "can be isolating at times",
];
const ADVICE: &[&str] = &[
    "One concrete step is to reach out to a mentor you trust.",
    "Consider writing down what matters most to you this week.",
    "A local support group could offer practical guidance.",
    "Try setting one small, achievable goal for tomorrow.",
    "It may help to talk openly with someone close to you.",
    "Keeping a record of progress can make small wins visible.",
];

/// Deterministic backend: the response is a pure function of `(seed, request)`.
///
/// Text is readable filler drawn with ChaCha8 seeded from a SHA-256 of the
/// seed and every request field, so outputs are identical across processes
/// and platforms. Each response starts with a tag `[mock stage N #hash]`,
/// where N is inferred from the number of `Output: ` lines in the prompt.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    latency: Duration,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            latency: Duration::ZERO,
        }
    }

    /// Seed for repetition `run_index` derived from a base seed, so that
    /// repetitions sample different text while staying reproducible.
    pub fn derive_seed(base: u64, run_index: u32) -> u64 {
        let d = Sha256::new()
            .chain_update(b"mock-run")
            .chain_update(base.to_le_bytes())
            .chain_update(run_index.to_le_bytes())
            .finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, req: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [&req.model_name, &req.system_message, &req.user_message] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(req.temperature.to_bits().to_le_bytes());
        h.update(req.max_tokens.to_le_bytes());
        h.finalize().into()
    }

    /// Pure text generation, exposed for tests.
    pub fn generate(&self, req: &ChatRequest) -> (String, FinishReason) {
        let key = self.key(req);
        let mut rng = ChaCha8Rng::from_seed(key);
        let stage = req.user_message.lines().filter(|l| l.starts_with("Output: ")).count() + 1;

        let tag = format!("[mock stage {stage} #{}]", hex::encode(&key[..4]));
        let mut words: Vec<String> = tag.split(' ').map(str::to_string).collect();
        let sentences = rng.random_range(3..=6);
        for i in 0..sentences {
            let sentence = if i + 1 == sentences || rng.random_bool(0.25) {
                ADVICE.choose(&mut rng).expect("non-empty").to_string()
            } else {
                format!(
                    "{} {} {}.",
                    OPENERS.choose(&mut rng).expect("non-empty"),
                    SUBJECTS.choose(&mut rng).expect("non-empty"),
                    VERBS.choose(&mut rng).expect("non-empty"),
                )
            };
            words.extend(sentence.split(' ').map(str::to_string));
        }
        let limit = req.max_tokens as usize;
        if words.len() > limit {
            words.truncate(limit);
            (words.join(" "), FinishReason::Length)
        } else {
            (words.join(" "), FinishReason::Stop)
        }
    }
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let (text, finish_reason) = self.generate(request);
        let usage = TokenUsage {
            prompt_tokens: (request.system_message.split_whitespace().count()
                + request.user_message.split_whitespace().count()) as u32,
            completion_tokens: text.split_whitespace().count() as u32,
        };
        Ok(ChatResponse {
            text,
            finish_reason,
            usage: Some(usage),
            latency: self.latency,
            attempts: 1,
        })
    }
}
