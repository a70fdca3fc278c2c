use std::sync::{Condvar, Mutex};

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError};

/// Caps the number of in-flight requests to the wrapped backend.
pub struct ConcurrencyLimit<B> {
    inner: B,
    max: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl<B> ConcurrencyLimit<B> {
    pub fn new(inner: B, max: usize) -> Self {
        assert!(max >= 1, "concurrency limit must be >= 1");
        Self {
            inner,
            max,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.max
    }
}

struct Permit<'a, B>(&'a ConcurrencyLimit<B>);

impl<B> Drop for Permit<'_, B> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.released.notify_one();
    }
}

impl<B: ChatBackend> ChatBackend for ConcurrencyLimit<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.max {
                n = self.released.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
        }
        let _permit = Permit(self);
        self.inner.complete(request)
    }
}
