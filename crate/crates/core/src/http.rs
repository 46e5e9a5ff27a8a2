//! Blocking JSON-over-HTTP plumbing shared by the live adapters.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Retry schedule: `attempts` tries, sleeping `base_delay * 2^i` between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
        }
    }

    /// Runs `f` until it succeeds or attempts run out. Replay misses are not
    /// retried since they can never succeed.
    pub fn run<T>(&self, mut f: impl FnMut(u32) -> Result<T>) -> Result<T> {
        let attempts = self.attempts.max(1);
        let mut last = None;
        for i in 0..attempts {
            match f(i) {
                Ok(v) => return Ok(v),
                Err(e @ Error::ReplayMiss { .. }) => return Err(e),
                Err(e) => {
                    log::debug!("attempt {} of {attempts} failed: {e}", i + 1);
                    last = Some(e);
                    if i + 1 < attempts && self.base_delay_ms > 0 {
                        thread::sleep(Duration::from_millis(self.base_delay_ms << i.min(16)));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

/// Connection settings for one HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// May be left empty when the endpoint is only replayed.
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_secs: default_timeout_secs(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

/// A JSON client for one endpoint, with retry and concurrency limits.
#[derive(Debug)]
pub struct JsonEndpoint {
    config: EndpointConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl JsonEndpoint {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let limit = InFlightLimit::new(config.max_in_flight);
        JsonEndpoint {
            config,
            agent,
            limit,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// POSTs `body` to `base_url` joined with `path`, retrying per policy.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = join_url(&self.config.base_url, path);
        let token = self
            .config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        self.config.retry.run(|_| {
            let _permit = self.limit.acquire();
            let mut req = self.agent.post(&url);
            if let Some(t) = &token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            let resp = req.send_json(body.clone()).map_err(|e| Error::Endpoint {
                endpoint: url.clone(),
                reason: e.to_string(),
            })?;
            resp.into_json::<Value>().map_err(|e| Error::Endpoint {
                endpoint: url.clone(),
                reason: format!("bad JSON body: {e}"),
            })
        })
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    if path.is_empty() {
        return base.to_string();
    }
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn retries_until_success() {
        let mut calls = 0;
        let out = RetryPolicy::immediate(3).run(|i| {
            calls += 1;
            if i < 2 {
                Err(Error::invalid("flaky"))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
        assert_eq!(calls, 3);
    }

    #[test]
    fn gives_up_after_attempts_and_skips_replay_misses() {
        let mut calls = 0;
        let r: Result<()> = RetryPolicy::immediate(3).run(|_| {
            calls += 1;
            Err(Error::invalid("down"))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);

        let mut calls = 0;
        let r: Result<()> = RetryPolicy::immediate(3).run(|_| {
            calls += 1;
            Err(Error::ReplayMiss { stage: "s".into(), key: "k".into() })
        });
        assert!(matches!(r, Err(Error::ReplayMiss { .. })));
        assert_eq!(calls, 1);
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, active, peak) = (limit.clone(), active.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = limit.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h/v1/", "/chat"), "http://h/v1/chat");
        assert_eq!(join_url("http://h", ""), "http://h");
    }
}
