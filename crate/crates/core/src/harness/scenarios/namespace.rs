//! Chunk fetches for two namespaces enter the overlay at the consumer's
//! proxy, which tags them by ingest port. The first domain routes on the
//! service and leaves the namespace alone; the second routes on the
//! namespace to a cluster of two producer-side proxies, round robin.
//!
//! ```text
//! fetcher -> consumer -> domain1 -> domain2 -+-> dev-a  -> producer dev-a
//!                                            +-> dev-b  -> producer dev-b
//!                                            +-> test-a -> producer test-a
//!                                            +-> test-b -> producer test-b
//! ```

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use super::{ms, ScenarioSpec};
use crate::harness::builders::{cluster, headers, listener, rule, NodeBuilder};
use crate::harness::chunks::{chunk_fetch, chunk_server, ChunkServer, FetchParams, Object};
use crate::harness::overlay::Overlay;
use crate::harness::ports::free_addr;
use crate::harness::report::{Check, Report, Scaling, Trial};
use crate::model::{ClusterSpec, ListenerMode, NodeConfig, TunnelKind};

#[derive(Debug, Clone, Serialize)]
pub struct NamespaceParams {
    pub chunks: u32,
    pub fetch: FetchParams,
    pub tunnel_idle: Duration,
    /// Allowed distance of each producer's hit count from an even split.
    pub balance_tolerance: u32,
}

impl Default for NamespaceParams {
    fn default() -> Self {
        Self { chunks: 200, fetch: FetchParams::default(), tunnel_idle: Duration::from_secs(2), balance_tolerance: 2 }
    }
}

pub const NAMESPACES: [&str; 2] = ["DEV", "TEST"];

fn producers(ns: &str) -> [String; 2] {
    let l = ns.to_lowercase();
    [format!("{l}-a"), format!("{l}-b")]
}

fn idle(mut c: ClusterSpec, d: Duration) -> ClusterSpec {
    c.idle_timeout = Some(d);
    c
}

pub async fn run(spec: &ScenarioSpec) -> std::io::Result<Report> {
    run_with(spec, &NamespaceParams::default()).await
}

pub async fn run_with(spec: &ScenarioSpec, p: &NamespaceParams) -> std::io::Result<Report> {
    let mut report = Report::new("namespace", spec.mode.as_str(), spec.seed, json!(p));
    report.scaling = vec![
        Scaling::new("consumer", "chunk fetcher with pipeline 20", &format!("pipeline {}", p.fetch.pipeline), "unchanged"),
        Scaling::new("object", "file of unstated size", &format!("{} chunks of 1000 bytes", p.chunks), ""),
        Scaling::new("producers", "forwarders behind organization proxies", "UDP chunk servers", "no caching or named-data semantics"),
        Scaling::new("overhead vs direct", "up to 12% slower", "not measured", "needs the real forwarder"),
    ];

    let object = Object::new(&format!("dataset-{}", spec.seed), p.chunks);
    let mut servers: BTreeMap<String, ChunkServer> = BTreeMap::new();
    for ns in NAMESPACES {
        for tag in producers(ns) {
            let s = chunk_server("127.0.0.1:0".parse().unwrap(), &tag, ns, std::slice::from_ref(&object)).await?;
            servers.insert(tag, s);
        }
    }
    let ingest: BTreeMap<&str, SocketAddr> = NAMESPACES.iter().map(|ns| (*ns, free_addr())).collect();
    let configs = configs(p, &ingest, &servers);
    let overlay = Overlay::boot(&configs, Duration::from_secs(1)).await?;

    let mut checks_ok = (true, true, true);
    let mut index = 0;
    for trial in 0..spec.trials {
        for ns in NAMESPACES {
            let r = chunk_fetch(ingest[ns], ns, &object, &p.fetch).await;
            let own = producers(ns);
            let foreign: u32 = r.hits.iter().filter(|(tag, _)| !own.contains(tag)).map(|(_, n)| n).sum();
            let even = p.chunks / 2;
            let balanced = own.iter().all(|t| r.hits.get(t).copied().unwrap_or(0).abs_diff(even) <= p.balance_tolerance);
            checks_ok.0 &= r.digest_ok;
            checks_ok.1 &= foreign == 0;
            checks_ok.2 &= balanced;
            let mut t = Trial::new(index, ns, r.digest_ok && foreign == 0 && balanced, ms(r.elapsed));
            t.detail = json!({ "trial": trial, "fetch": r });
            report.trials.push(t);
            index += 1;
        }
    }
    report.config_versions = overlay.versions();
    let hits: BTreeMap<&String, u64> = servers.iter().map(|(t, s)| (t, s.served())).collect();
    report.checks.push(Check::new("objects reassemble with the published digest", checks_ok.0, ""));
    report.checks.push(Check::new("every chunk answered by its own namespace", checks_ok.1, format!("served {hits:?}")));
    report.checks.push(Check::new(
        "round robin within tolerance",
        checks_ok.2,
        format!("{} chunks per fetch, tolerance {}", p.chunks, p.balance_tolerance),
    ));
    Ok(report)
}

fn configs(p: &NamespaceParams, ingest: &BTreeMap<&str, SocketAddr>, servers: &BTreeMap<String, ChunkServer>) -> Vec<NodeConfig> {
    let domain1 = free_addr();
    let domain2 = free_addr();
    let org: BTreeMap<&String, SocketAddr> = servers.keys().map(|t| (t, free_addr())).collect();
    let mut out = Vec::new();

    let mut consumer = NodeBuilder::new("consumer", 1);
    for (ns, addr) in ingest {
        let mut l = listener(*addr, ListenerMode::UdpIngest, &ns.to_lowercase());
        l.implicit_headers = headers(&[("service", "NDN"), ("namespace", ns)]);
        consumer = consumer.listener(l);
    }
    out.push(
        consumer
            .route(rule(&[], "domain1"))
            .cluster(idle(cluster("domain1", TunnelKind::UdpOverHttp, &[domain1]), p.tunnel_idle))
            .build(),
    );

    let mut d1_rule = rule(&[("service", "NDN")], "domain2");
    d1_rule.defer.insert("namespace".into());
    out.push(
        NodeBuilder::new("domain1", 1)
            .listener(listener(domain1, ListenerMode::Http, "http"))
            .route(d1_rule)
            .cluster(idle(cluster("domain2", TunnelKind::UdpOverHttp, &[domain2]), p.tunnel_idle))
            .build(),
    );

    let mut d2 = NodeBuilder::new("domain2", 1).listener(listener(domain2, ListenerMode::Http, "http"));
    for ns in NAMESPACES {
        let name = ns.to_lowercase();
        let eps: Vec<SocketAddr> = producers(ns).iter().map(|t| org[t]).collect();
        d2 = d2
            .route(rule(&[("namespace", ns)], &name))
            .cluster(idle(cluster(&name, TunnelKind::UdpOverHttp, &eps), p.tunnel_idle));
    }
    out.push(d2.build());

    for (tag, server) in servers {
        out.push(
            NodeBuilder::new(&format!("org-{tag}"), 1)
                .listener(listener(org[tag], ListenerMode::Http, "http"))
                .route(rule(&[], "producer"))
                .cluster(idle(cluster("producer", TunnelKind::PlainUdp, &[server.addr]), p.tunnel_idle))
                .build(),
        );
    }
    out
}
