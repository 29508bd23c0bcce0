use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::join_all;
use tokio::sync::Semaphore;
use tokio::time::Instant;

use super::{BackendError, ChatRequest, ChatResponse, ModelBackend, RetryPolicy, TransportError};

/// Sends requests under a [`RetryPolicy`]: at most `max_in_flight`
/// outstanding requests, per-backend pacing, bounded retries with
/// exponential backoff.
pub struct Dispatcher {
    policy: RetryPolicy,
    in_flight: Semaphore,
    pacers: Mutex<HashMap<String, Arc<Pacer>>>,
}

/// Evenly spaced send slots, one every `interval`.
struct Pacer {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Pacer {
    async fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

impl Dispatcher {
    pub fn new(policy: RetryPolicy) -> Self {
        let permits = policy.max_in_flight.max(1);
        Dispatcher {
            policy,
            in_flight: Semaphore::new(permits),
            pacers: Mutex::new(HashMap::new()),
        }
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    fn pacer(&self, backend: &str) -> Option<Arc<Pacer>> {
        let rate = self.policy.per_backend_rate?;
        let mut pacers = self.pacers.lock().unwrap();
        let p = pacers.entry(backend.to_string()).or_insert_with(|| {
            Arc::new(Pacer {
                interval: Duration::from_secs_f64(1.0 / rate),
                next: Mutex::new(None),
            })
        });
        Some(Arc::clone(p))
    }

    /// Sends one request, retrying transient failures. The in-flight permit
    /// is held across retries, so backoff time counts as outstanding.
    pub async fn call(&self, backend: &dyn ModelBackend, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let name = &backend.id().name;
        let pacer = self.pacer(name);
        let mut backoff = self.policy.base_backoff;
        let max = self.policy.max_attempts.max(1);
        let mut reason = String::new();
        for attempt in 1..=max {
            if let Some(p) = &pacer {
                p.wait().await;
            }
            match backend.complete(req).await {
                Ok(resp) => return Ok(resp),
                Err(TransportError::Permanent(msg)) => {
                    return Err(BackendError::BackendUnavailable {
                        backend: name.clone(),
                        attempts: attempt,
                        reason: msg,
                    })
                }
                Err(TransportError::Retryable(msg)) => {
                    tracing::debug!(backend = %name, key = %req.key, attempt, "retryable failure: {msg}");
                    reason = msg;
                    if attempt < max {
                        tokio::time::sleep(backoff).await;
                        backoff = backoff.mul_f64(self.policy.backoff_factor);
                    }
                }
            }
        }
        Err(BackendError::BackendUnavailable {
            backend: name.clone(),
            attempts: max,
            reason,
        })
    }

    /// Runs a batch concurrently. Outcomes come back in input order and one
    /// failure never cancels the others.
    pub async fn dispatch(
        &self,
        batch: &[(Arc<dyn ModelBackend>, ChatRequest)],
    ) -> Vec<Result<ChatResponse, BackendError>> {
        join_all(batch.iter().map(|(b, r)| self.call(b.as_ref(), r))).await
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use async_trait::async_trait;

    use super::*;
    use crate::backends::{BackendId, Role};

    /// Tracks concurrency and fails keys that start with `fail`.
    struct Probe {
        id: BackendId,
        current: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
        delay: Duration,
    }

    impl Probe {
        fn new(delay: Duration) -> Arc<Self> {
            Arc::new(Probe {
                id: BackendId::new("probe", [Role::Judge], None).unwrap(),
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                calls: AtomicUsize::new(0),
                delay,
            })
        }
    }

    #[async_trait]
    impl ModelBackend for Probe {
        fn id(&self) -> &BackendId {
            &self.id
        }

        async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(self.delay).await;
            self.current.fetch_sub(1, Ordering::SeqCst);
            if req.key.starts_with("fail") {
                Err(TransportError::Retryable("boom".into()))
            } else {
                Ok(ChatResponse {
                    text: req.key.clone(),
                    ..ChatResponse::default()
                })
            }
        }
    }

    fn req(key: String) -> ChatRequest {
        ChatRequest {
            key,
            role: Role::Judge,
            prompt: String::new(),
            image: None,
            temperature: None,
            logprobs: false,
            judge: None,
        }
    }

    fn policy() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(1),
            backoff_factor: 2.0,
            per_backend_rate: None,
            max_in_flight: 8,
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn never_exceeds_max_in_flight_and_isolates_failures() {
        let probe = Probe::new(Duration::from_millis(5));
        let d = Dispatcher::new(policy());
        let batch: Vec<_> = (0..100)
            .map(|i| {
                let key = if i == 42 { "fail-42".to_string() } else { format!("k{i}") };
                (probe.clone() as Arc<dyn ModelBackend>, req(key))
            })
            .collect();
        let out = d.dispatch(&batch).await;
        assert!(probe.peak.load(Ordering::SeqCst) <= 8);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 99);
        assert_eq!(out[3].as_ref().unwrap().text, "k3");
        assert!(matches!(
            out[42],
            Err(BackendError::BackendUnavailable { attempts: 3, .. })
        ));
        // 99 successes plus three attempts for the failing key.
        assert_eq!(probe.calls.load(Ordering::SeqCst), 102);
    }

    #[tokio::test]
    async fn rate_cap_spaces_requests() {
        let probe = Probe::new(Duration::ZERO);
        let d = Dispatcher::new(RetryPolicy {
            per_backend_rate: Some(2.0),
            ..policy()
        });
        let batch: Vec<_> = (0..10)
            .map(|i| (probe.clone() as Arc<dyn ModelBackend>, req(format!("k{i}"))))
            .collect();
        let start = std::time::Instant::now();
        let out = d.dispatch(&batch).await;
        let elapsed = start.elapsed();
        assert!(out.iter().all(Result::is_ok));
        // Ten slots half a second apart: the last one opens at 4.5 s.
        assert!(elapsed >= Duration::from_millis(4500), "{elapsed:?}");
        assert!(elapsed < Duration::from_millis(6000), "{elapsed:?}");
    }
}
