//! Terse constructors for node configs, used by scenarios and tests.

use std::net::SocketAddr;
use std::time::Duration;

use crate::model::{
    ClusterSpec, Endpoint, HeaderMap, LbPolicy, ListenerMode, ListenerSpec, NodeConfig, PolicyRule, RetryPolicy,
    RouteMatch, RouteRule, Transport, TunnelKind,
};

pub fn headers(pairs: &[(&str, &str)]) -> HeaderMap {
    pairs.iter().copied().collect()
}

pub fn listener(addr: SocketAddr, mode: ListenerMode, port_tag: &str) -> ListenerSpec {
    let transport = if mode == ListenerMode::UdpIngest { Transport::Udp } else { Transport::Tcp };
    ListenerSpec {
        bind: Endpoint::from_addr(addr, transport),
        mode,
        port_tag: port_tag.into(),
        implicit_headers: HeaderMap::new(),
    }
}

pub fn rule(matching: &[(&str, &str)], action: &str) -> RouteRule {
    RouteRule {
        matcher: RouteMatch { headers: headers(matching), port_tag: None },
        action: action.into(),
        append: HeaderMap::new(),
        defer: Default::default(),
        policy_gate: None,
    }
}

pub fn cluster(name: &str, kind: TunnelKind, endpoints: &[SocketAddr]) -> ClusterSpec {
    let transport = if kind == TunnelKind::PlainUdp { Transport::Udp } else { Transport::Tcp };
    ClusterSpec {
        name: name.into(),
        endpoints: endpoints.iter().map(|a| Endpoint::from_addr(*a, transport)).collect(),
        lb: LbPolicy::RoundRobin,
        retry: RetryPolicy::default(),
        tunnel_kind: kind,
        idle_timeout: None,
    }
}

pub struct NodeBuilder(NodeConfig);

impl NodeBuilder {
    pub fn new(node_id: &str, version: u64) -> Self {
        let mut cfg = NodeConfig::empty(node_id);
        cfg.version = version;
        Self(cfg)
    }

    pub fn listener(mut self, l: ListenerSpec) -> Self {
        self.0.listeners.push(l);
        self
    }

    pub fn route(mut self, r: RouteRule) -> Self {
        self.0.routes.push(r);
        self
    }

    pub fn cluster(mut self, c: ClusterSpec) -> Self {
        self.0.clusters.push(c);
        self
    }

    pub fn address_space(mut self, name: &str, cluster: &str) -> Self {
        self.0.address_spaces.insert(name.into(), cluster.into());
        self
    }

    pub fn policy(mut self, p: PolicyRule) -> Self {
        self.0.policies.push(p);
        self
    }

    pub fn drain(mut self, d: Duration) -> Self {
        self.0.drain_time = d;
        self
    }

    pub fn build(self) -> NodeConfig {
        self.0
    }
}
