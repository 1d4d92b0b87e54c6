use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_s: 1.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_attempts < 1 {
            return Err(BackendError::Precondition("retry.max_attempts must be >= 1".into()));
        }
        if !(self.backoff_base_s >= 0.0 && self.backoff_base_s.is_finite()) {
            return Err(BackendError::Precondition("retry.backoff_base_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Delay after the failed attempt `attempt` (1-based): `base * 2^(attempt - 1)`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 2f64.powi(attempt.saturating_sub(1).min(30) as i32);
        Duration::from_secs_f64(self.backoff_base_s * factor)
    }
}

/// Outcome of one attempt inside [`run_with_retry`].
pub enum Attempt<T> {
    Done(T),
    Transient(String),
    Fatal(BackendError),
}

/// Runs `op` until it succeeds, fails fatally, or `max_attempts` is spent.
/// `op` receives the 1-based attempt number.
pub fn run_with_retry<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut(u32) -> Attempt<T>,
) -> Result<T, BackendError> {
    let max = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=max {
        match op(attempt) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(msg) => {
                log::warn!("transient backend failure (attempt {attempt}/{max}): {msg}");
                last = msg;
                if attempt < max {
                    sleep(policy.delay_after(attempt));
                }
            }
        }
    }
    Err(BackendError::TransientExhausted { attempts: max, last })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_delays() {
        let p = RetryPolicy {
            max_attempts: 5,
            backoff_base_s: 0.5,
        };
        let d: Vec<f64> = (1..=4).map(|a| p.delay_after(a).as_secs_f64()).collect();
        assert_eq!(d, vec![0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn succeeds_after_two_transients() {
        let p = RetryPolicy {
            max_attempts: 3,
            backoff_base_s: 0.25,
        };
        let mut slept = Vec::new();
        let mut calls = 0;
        let out = run_with_retry(&p, |d| slept.push(d.as_secs_f64()), |_| {
            calls += 1;
            if calls < 3 {
                Attempt::Transient("429".into())
            } else {
                Attempt::Done(calls)
            }
        });
        assert_eq!(out.unwrap(), 3);
        assert_eq!(slept, vec![0.25, 0.5]);
    }

    #[test]
    fn never_exceeds_max_attempts() {
        for max in 1..6 {
            let p = RetryPolicy {
                max_attempts: max,
                backoff_base_s: 0.0,
            };
            let mut calls = 0;
            let out: Result<(), _> = run_with_retry(&p, |_| {}, |_| {
                calls += 1;
                Attempt::Transient("503".into())
            });
            assert!(matches!(out, Err(BackendError::TransientExhausted { attempts, .. }) if attempts == max));
            assert_eq!(calls, max);
        }
    }

    #[test]
    fn fatal_stops_immediately() {
        let mut calls = 0;
        let out: Result<(), _> = run_with_retry(&RetryPolicy::default(), |_| {}, |_| {
            calls += 1;
            Attempt::Fatal(BackendError::Auth("401".into()))
        });
        assert!(matches!(out, Err(BackendError::Auth(_))));
        assert_eq!(calls, 1);
    }
}
