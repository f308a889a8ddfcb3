use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::model::TunnelKind;

#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn inc(&self) {
        self.add(1);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Gauge that may go down as well as up.
#[derive(Debug, Default)]
pub struct Gauge(AtomicU64);

impl Gauge {
    pub fn inc(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn dec(&self) {
        self.0.fetch_sub(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
pub struct ListenerStats {
    pub accepted: Counter,
    pub active: Gauge,
    pub no_route: Counter,
    pub dropped: Counter,
}

#[derive(Debug, Default)]
pub struct ClusterStats {
    pub sessions: Counter,
    pub attempts: Counter,
    pub retries: Counter,
    pub retries_exhausted: Counter,
    pub upstream_failures: Counter,
    pub bytes_up: Counter,
    pub bytes_down: Counter,
    pub datagrams_up: Counter,
    pub datagrams_down: Counter,
}

/// Process-wide proxy counters. Listener and cluster entries are created on
/// first use and live as long as the proxy.
#[derive(Debug, Default)]
pub struct Stats {
    pub route_matched: Counter,
    pub no_route: Counter,
    pub policy_denied: Counter,
    pub bad_requests: Counter,
    pub swaps: Counter,
    sessions_by_kind: [Counter; 4],
    listeners: RwLock<HashMap<String, Arc<ListenerStats>>>,
    clusters: RwLock<HashMap<String, Arc<ClusterStats>>>,
}

fn entry<T: Default>(map: &RwLock<HashMap<String, Arc<T>>>, key: &str) -> Arc<T> {
    if let Some(v) = map.read().unwrap().get(key) {
        return v.clone();
    }
    map.write().unwrap().entry(key.to_string()).or_default().clone()
}

fn kind_index(kind: TunnelKind) -> usize {
    match kind {
        TunnelKind::UdpOverHttp => 0,
        TunnelKind::TcpConnect => 1,
        TunnelKind::PlainTcp => 2,
        TunnelKind::PlainUdp => 3,
    }
}

const KINDS: [TunnelKind; 4] =
    [TunnelKind::UdpOverHttp, TunnelKind::TcpConnect, TunnelKind::PlainTcp, TunnelKind::PlainUdp];

impl Stats {
    pub fn listener(&self, key: &str) -> Arc<ListenerStats> {
        entry(&self.listeners, key)
    }

    pub fn cluster(&self, name: &str) -> Arc<ClusterStats> {
        entry(&self.clusters, name)
    }

    pub fn session_started(&self, kind: TunnelKind) {
        self.sessions_by_kind[kind_index(kind)].inc();
    }

    pub fn snapshot(&self, node_id: &str, config_version: u64) -> StatsSnapshot {
        let listeners = self.listeners.read().unwrap();
        let clusters = self.clusters.read().unwrap();
        StatsSnapshot {
            node_id: node_id.to_string(),
            config_version,
            route_matched: self.route_matched.get(),
            no_route: self.no_route.get(),
            policy_denied: self.policy_denied.get(),
            bad_requests: self.bad_requests.get(),
            swaps: self.swaps.get(),
            sessions_by_kind: KINDS.iter().map(|k| (k.as_str().to_string(), self.sessions_by_kind[kind_index(*k)].get())).collect(),
            listeners: listeners
                .iter()
                .map(|(k, v)| {
                    let snap = ListenerSnapshot {
                        accepted: v.accepted.get(),
                        active: v.active.get(),
                        no_route: v.no_route.get(),
                        dropped: v.dropped.get(),
                    };
                    (k.clone(), snap)
                })
                .collect(),
            clusters: clusters
                .iter()
                .map(|(k, v)| {
                    let snap = ClusterSnapshot {
                        sessions: v.sessions.get(),
                        attempts: v.attempts.get(),
                        retries: v.retries.get(),
                        retries_exhausted: v.retries_exhausted.get(),
                        upstream_failures: v.upstream_failures.get(),
                        bytes_up: v.bytes_up.get(),
                        bytes_down: v.bytes_down.get(),
                        datagrams_up: v.datagrams_up.get(),
                        datagrams_down: v.datagrams_down.get(),
                    };
                    (k.clone(), snap)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerSnapshot {
    pub accepted: u64,
    pub active: u64,
    pub no_route: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub sessions: u64,
    pub attempts: u64,
    pub retries: u64,
    pub retries_exhausted: u64,
    pub upstream_failures: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub datagrams_up: u64,
    pub datagrams_down: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub node_id: String,
    pub config_version: u64,
    pub route_matched: u64,
    pub no_route: u64,
    pub policy_denied: u64,
    pub bad_requests: u64,
    pub swaps: u64,
    pub sessions_by_kind: BTreeMap<String, u64>,
    pub listeners: BTreeMap<String, ListenerSnapshot>,
    pub clusters: BTreeMap<String, ClusterSnapshot>,
}

impl StatsSnapshot {
    pub fn cluster(&self, name: &str) -> ClusterSnapshot {
        self.clusters.get(name).cloned().unwrap_or_default()
    }

    pub fn listener(&self, key: &str) -> ListenerSnapshot {
        self.listeners.get(key).cloned().unwrap_or_default()
    }
}
