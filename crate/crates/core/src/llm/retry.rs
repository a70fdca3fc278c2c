use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::warn;

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError, RetryPolicy};

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Retries retryable errors with exponential backoff, up to
/// `policy.max_attempts` calls in total.
pub struct Retry<B> {
    inner: B,
    policy: RetryPolicy,
    sleep: Sleeper,
}

pub fn with_retry<B: ChatBackend>(inner: B, policy: RetryPolicy) -> Retry<B> {
    Retry::new(inner, policy)
}

impl<B: ChatBackend> Retry<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        assert!(policy.max_attempts >= 1, "retry policy needs at least one attempt");
        Self {
            inner,
            policy,
            sleep: Arc::new(thread::sleep),
        }
    }

    /// Replaces the sleep function (tests use a no-op or a recorder).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for Retry<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut attempt = 1;
        loop {
            match self.inner.complete(request) {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() && attempt < self.policy.max_attempts => {
                    let mut delay = self.policy.backoff(attempt);
                    if let LlmError::RateLimited {
                        retry_after: Some(after),
                        ..
                    } = &e
                    {
                        delay = delay.max(*after);
                    }
                    warn!(
                        "attempt {attempt}/{} failed ({e}); retrying in {delay:?}",
                        self.policy.max_attempts
                    );
                    (self.sleep)(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;
    use std::sync::Mutex;

    use proptest::prelude::*;

    use super::*;
    use crate::llm::{CountingBackend, FinishReason, RunConfig};

    /// Plays back a script of outcomes: `true` succeeds, `false` fails retryably.
    struct Scripted {
        script: Mutex<VecDeque<Result<(), LlmError>>>,
    }

    impl Scripted {
        fn new(script: Vec<Result<(), LlmError>>) -> Self {
            Self {
                script: Mutex::new(script.into()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let next = self
                .script
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err(LlmError::Transport("script exhausted".into())));
            next.map(|_| ChatResponse {
                text: "ok".into(),
                finish_reason: FinishReason::Stop,
                usage: None,
                latency: Duration::ZERO,
                attempts: 1,
            })
        }
    }

    fn rate_limited() -> Result<(), LlmError> {
        Err(LlmError::RateLimited {
            body: "slow down".into(),
            retry_after: None,
        })
    }

    fn policy(n: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: n,
            backoff_base_ms: 10,
            backoff_max_ms: 1000,
        }
    }

    fn request() -> ChatRequest {
        ChatRequest::new(&RunConfig::default(), "sys", "ping")
    }

    fn retry(script: Vec<Result<(), LlmError>>, n: u32) -> Retry<CountingBackend<Scripted>> {
        Retry::new(CountingBackend::new(Scripted::new(script)), policy(n)).with_sleeper(|_| {})
    }

    #[test]
    fn always_failing_stops_at_max_attempts() {
        let r = retry(vec![rate_limited(); 10], 3);
        let err = r.complete(&request()).unwrap_err();
        assert!(matches!(err, LlmError::RateLimited { .. }));
        assert_eq!(r.inner().calls(), 3);
    }

    #[test]
    fn immediate_success_is_one_call() {
        let r = retry(vec![Ok(())], 3);
        let resp = r.complete(&request()).unwrap();
        assert_eq!(resp.attempts, 1);
        assert_eq!(r.inner().calls(), 1);
    }

    #[test]
    fn fail_fail_succeed() {
        let r = retry(vec![rate_limited(), rate_limited(), Ok(())], 3);
        let resp = r.complete(&request()).unwrap();
        assert_eq!(resp.attempts, 3);
        assert_eq!(r.inner().calls(), 3);
    }

    #[test]
    fn non_retryable_is_not_retried() {
        let auth = Err(LlmError::Auth {
            status: 401,
            body: "bad key".into(),
        });
        let r = retry(vec![auth, Ok(())], 5);
        assert!(matches!(r.complete(&request()), Err(LlmError::Auth { .. })));
        assert_eq!(r.inner().calls(), 1);
    }

    #[test]
    fn backoff_delays_recorded() {
        let delays = Arc::new(Mutex::new(Vec::new()));
        let d = delays.clone();
        let r = Retry::new(
            Scripted::new(vec![
                rate_limited(),
                Err(LlmError::RateLimited {
                    body: String::new(),
                    retry_after: Some(Duration::from_secs(2)),
                }),
                Ok(()),
            ]),
            policy(5),
        )
        .with_sleeper(move |t| d.lock().unwrap().push(t));
        r.complete(&request()).unwrap();
        assert_eq!(
            *delays.lock().unwrap(),
            vec![Duration::from_millis(10), Duration::from_secs(2)]
        );
    }

    proptest! {
        #[test]
        fn call_count_matches_policy(
            faults in prop::collection::vec(prop::bool::ANY, 0..12),
            max_attempts in 1u32..8,
        ) {
            // `true` = retryable failure; the script ends with a success.
            let mut script: Vec<Result<(), LlmError>> = faults
                .iter()
                .map(|&f| if f { rate_limited() } else { Ok(()) })
                .collect();
            script.push(Ok(()));
            let first_ok = script.iter().position(|s| s.is_ok()).unwrap();
            let r = retry(script, max_attempts);
            let result = r.complete(&request());
            let expected_calls = (first_ok + 1).min(max_attempts as usize);
            prop_assert_eq!(r.inner().calls(), expected_calls);
            if first_ok < max_attempts as usize {
                prop_assert_eq!(result.unwrap().attempts as usize, first_ok + 1);
            } else {
                prop_assert!(result.is_err());
            }
        }
    }
}
