use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::model::{ClusterSpec, Endpoint, LbPolicy};

/// A cluster as compiled into one config epoch: the spec plus its
/// load-balancing state, shared by every session of the epoch.
#[derive(Debug)]
pub struct ClusterState {
    spec: ClusterSpec,
    cursor: AtomicUsize,
    failed: Vec<AtomicBool>,
}

impl ClusterState {
    pub fn new(spec: ClusterSpec) -> Self {
        let failed = spec.endpoints.iter().map(|_| AtomicBool::new(false)).collect();
        Self { spec, cursor: AtomicUsize::new(0), failed }
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    /// Picks the endpoint for the next attempt. Returns its index and the
    /// endpoint; the cluster must be non-empty.
    pub fn select_endpoint(&self) -> (usize, &Endpoint) {
        let n = self.spec.endpoints.len();
        let idx = match self.spec.lb {
            LbPolicy::RoundRobin => self.cursor.fetch_add(1, Ordering::Relaxed) % n,
            // all failed: fall back to the first
            LbPolicy::FirstHealthy => self.failed.iter().position(|f| !f.load(Ordering::Relaxed)).unwrap_or(0),
        };
        (idx, &self.spec.endpoints[idx])
    }

    pub fn mark_failed(&self, idx: usize) {
        if let Some(f) = self.failed.get(idx) {
            f.store(true, Ordering::Relaxed);
        }
    }

    pub fn is_failed(&self, idx: usize) -> bool {
        self.failed.get(idx).is_some_and(|f| f.load(Ordering::Relaxed))
    }
}
