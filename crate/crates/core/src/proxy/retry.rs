use std::future::Future;
use std::io;
use std::time::Duration;

use thiserror::Error;
use tokio::time::Instant;

use crate::model::{RetryOn, RetryPolicy};

/// One failed attempt, classified for the retry policy.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{class:?}: {detail}")]
pub struct AttemptError {
    pub class: RetryOn,
    pub detail: String,
    /// Upstream status, when the failure was an HTTP response.
    pub status: Option<u16>,
    pub timed_out: bool,
}

impl AttemptError {
    pub fn new(class: RetryOn, detail: impl Into<String>) -> Self {
        Self { class, detail: detail.into(), status: None, timed_out: false }
    }

    pub fn connect(e: &io::Error) -> Self {
        Self::new(RetryOn::ConnectFailure, e.to_string())
    }

    /// Classifies an I/O error seen after the connection was established.
    pub fn io(e: &io::Error) -> Self {
        let class = match e.kind() {
            io::ErrorKind::UnexpectedEof => RetryOn::RefusedStream,
            _ => RetryOn::Reset,
        };
        Self::new(class, e.to_string())
    }

    pub fn status(status: u16) -> Self {
        let class = match status {
            502..=504 => RetryOn::GatewayError,
            _ => RetryOn::Status5xx,
        };
        Self { status: Some(status), ..Self::new(class, format!("upstream answered {status}")) }
    }

    /// Non-200 answer to a tunnel request.
    pub fn tunnel_refused(status: u16) -> Self {
        Self { status: Some(status), ..Self::new(RetryOn::GatewayError, format!("tunnel refused with {status}")) }
    }

    pub fn timeout(after: Duration) -> Self {
        Self { timed_out: true, ..Self::new(RetryOn::GatewayError, format!("no answer within {after:?}")) }
    }

    /// Status to report downstream when this is the terminal failure.
    pub fn downstream_status(&self) -> u16 {
        match (self.timed_out, self.status) {
            (true, _) => 504,
            (false, Some(s)) if s >= 500 => s,
            _ => 502,
        }
    }
}

#[derive(Debug)]
pub struct Outcome<T> {
    pub result: Result<T, AttemptError>,
    pub attempts: u32,
    pub total_elapsed: Duration,
}

impl<T> Outcome<T> {
    /// True when the last failure was retryable but attempts ran out.
    pub fn exhausted(&self, policy: &RetryPolicy) -> bool {
        matches!(&self.result, Err(e) if policy.retries(e.class))
    }
}

/// Runs `attempt` until it succeeds, fails with a class outside `retry_on`,
/// or `1 + num_retries` attempts have been made. Each attempt is bounded by
/// `per_try_timeout`; `backoff` is slept between attempts. The closure gets
/// the 1-based attempt number.
pub async fn execute_with_retry<T, F, Fut>(policy: &RetryPolicy, mut attempt: F) -> Outcome<T>
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<T, AttemptError>>,
{
    let start = Instant::now();
    let max = policy.max_attempts();
    let mut n = 0;
    loop {
        n += 1;
        let result = match tokio::time::timeout(policy.per_try_timeout, attempt(n)).await {
            Ok(r) => r,
            Err(_) => Err(AttemptError::timeout(policy.per_try_timeout)),
        };
        match result {
            Ok(v) => return Outcome { result: Ok(v), attempts: n, total_elapsed: start.elapsed() },
            Err(e) if n < max && policy.retries(e.class) => {
                tracing::debug!(attempt = n, "retrying after {e}");
                tokio::time::sleep(policy.backoff).await;
            }
            Err(e) => return Outcome { result: Err(e), attempts: n, total_elapsed: start.elapsed() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn policy(num_retries: u32, on: &[RetryOn]) -> RetryPolicy {
        RetryPolicy {
            num_retries,
            retry_on: on.iter().copied().collect::<BTreeSet<_>>(),
            backoff: Duration::from_millis(10),
            ..RetryPolicy::default()
        }
    }

    #[tokio::test(start_paused = true)]
    async fn two_connect_failures_then_success() {
        let p = policy(2, &[RetryOn::ConnectFailure]);
        let calls = AtomicU32::new(0);
        let out = execute_with_retry(&p, |n| {
            calls.fetch_add(1, Ordering::SeqCst);
            async move {
                if n < 3 {
                    Err(AttemptError::new(RetryOn::ConnectFailure, "refused"))
                } else {
                    Ok(n)
                }
            }
        })
        .await;
        assert_eq!(out.result, Ok(3));
        assert_eq!(out.attempts, 3);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(out.total_elapsed, Duration::from_millis(20));
    }

    #[tokio::test(start_paused = true)]
    async fn stalled_attempt_is_cut_at_per_try_timeout() {
        let mut p = policy(1, &[RetryOn::GatewayError]);
        p.per_try_timeout = Duration::from_secs(25);
        p.backoff = Duration::ZERO;
        let out = execute_with_retry(&p, |n| async move {
            if n == 1 {
                std::future::pending::<()>().await;
            }
            Ok(n)
        })
        .await;
        assert_eq!(out.result, Ok(2));
        assert_eq!(out.total_elapsed, Duration::from_secs(25));
    }

    #[tokio::test(start_paused = true)]
    async fn class_outside_retry_on_is_terminal() {
        let p = policy(5, &[RetryOn::ConnectFailure]);
        let out: Outcome<()> =
            execute_with_retry(&p, |_| async { Err(AttemptError::new(RetryOn::Reset, "rst")) }).await;
        assert_eq!(out.attempts, 1);
        assert_eq!(out.result.as_ref().unwrap_err().class, RetryOn::Reset);
        assert!(!out.exhausted(&p));
    }

    #[tokio::test(start_paused = true)]
    async fn exhaustion_makes_one_plus_num_retries_attempts() {
        let p = policy(3, &RetryOn::ALL);
        let out: Outcome<()> = execute_with_retry(&p, |_| async { Err(AttemptError::status(503)) }).await;
        assert_eq!(out.attempts, 4);
        assert!(out.exhausted(&p));
        assert_eq!(out.result.unwrap_err().downstream_status(), 503);
    }

    #[test]
    fn status_classes() {
        assert_eq!(AttemptError::status(502).class, RetryOn::GatewayError);
        assert_eq!(AttemptError::status(500).class, RetryOn::Status5xx);
        assert_eq!(AttemptError::timeout(Duration::from_secs(1)).downstream_status(), 504);
        assert_eq!(AttemptError::tunnel_refused(403).downstream_status(), 502);
    }
}
