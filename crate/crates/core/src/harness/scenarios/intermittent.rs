//! Three links take turns being up, one per slot. Direct: the client's TCP
//! connection has to cross all three at once and never can. Overlay: a
//! proxy sits between each pair of links, so every TCP connection needs
//! only its own link, and per-hop retries wait for it.

use std::net::SocketAddr;
use std::time::{Duration, SystemTime};

use serde_json::json;

use super::{ms, uniform, Mode, ScenarioSpec};
use crate::harness::builders::{cluster, headers, listener, rule, NodeBuilder};
use crate::harness::files::{file_server, http_file_client, sha256_hex, synthetic_file, DownloadParams, DownloadRequest};
use crate::harness::overlay::Overlay;
use crate::harness::ports::free_addr;
use crate::harness::report::{Check, Report, Scaling, Trial};
use crate::model::{ClusterSpec, ListenerMode, NodeConfig, RetryOn, RetryPolicy, Transport, TunnelKind};
use crate::netsim::{ImpairmentSpec, LinkSchedule, Relay, RelaySpec};

#[derive(Debug, Clone, serde::Serialize)]
pub struct IntermittentParams {
    pub file_size: usize,
    pub links: u32,
    pub slot: Duration,
    pub download: DownloadParams,
    pub retry: RetryPolicy,
}

impl Default for IntermittentParams {
    fn default() -> Self {
        Self {
            file_size: 100 * 1024,
            links: 3,
            slot: Duration::from_secs(1),
            download: DownloadParams { tries: 10, waitretry: Duration::from_secs(2), timeout: Duration::from_secs(15) },
            retry: RetryPolicy {
                num_retries: 5,
                per_try_timeout: Duration::from_secs(10),
                retry_on: RetryOn::ALL.into_iter().collect(),
                max_connect_attempts: 1,
                backoff: Duration::from_millis(500),
            },
        }
    }
}

fn scaling(p: &IntermittentParams) -> Vec<Scaling> {
    let per_try = format!("{}s", p.retry.per_try_timeout.as_secs());
    vec![
        Scaling::new("file size", "1 MB and 10 MB", &format!("{} KiB", p.file_size / 1024), "loopback has no bandwidth cap"),
        Scaling::new("rotation", "3 links, 1 s each", &format!("{} links, {:?} each", p.links, p.slot), "unchanged"),
        Scaling::new("client tries", "10", &p.download.tries.to_string(), "unchanged"),
        Scaling::new("client waitretry", "20 s", &format!("{:?}", p.download.waitretry), "10x shorter"),
        Scaling::new("client timeout", "60 s", &format!("{:?}", p.download.timeout), "must exceed a response crossing all links"),
        Scaling::new("per-try timeout", "25 s", &per_try, "must exceed two rotations"),
        Scaling::new("hop retries", "2", &p.retry.num_retries.to_string(), "refused dials fail fast, so attempts are spread over a rotation"),
        Scaling::new("hop backoff", "default", &format!("{:?}", p.retry.backoff), "half a slot"),
    ]
}

pub async fn run(spec: &ScenarioSpec) -> std::io::Result<Report> {
    run_with(spec, &IntermittentParams::default()).await
}

pub async fn run_with(spec: &ScenarioSpec, p: &IntermittentParams) -> std::io::Result<Report> {
    let mut report = Report::new("intermittent", spec.mode.as_str(), spec.seed, json!(p));
    report.scaling = scaling(p);
    let dir = tempfile::tempdir()?;
    let data = synthetic_file(p.file_size, spec.seed);
    std::fs::write(dir.path().join("file.bin"), &data)?;
    let server = file_server(free_addr(), dir.path().to_path_buf()).await?;

    let epoch = SystemTime::now();
    let schedule = |i: u32| ImpairmentSpec {
        schedule: Some(LinkSchedule::new(p.links, i, p.slot, epoch)),
        ..ImpairmentSpec::default()
    };
    // link i forwards to `next`; built back to front
    let mut relays = Vec::new();
    let mut overlay = None;
    let entry = match spec.mode {
        Mode::Direct => {
            let mut next = server.addr;
            for i in (0..p.links).rev() {
                let r = tcp_relay(next, schedule(i)).await?;
                next = r.local_addr();
                relays.push(r);
            }
            next
        }
        Mode::Overlay => {
            let (configs, entry, mut hop_relays) = overlay_chain(p, server.addr, &schedule).await?;
            relays.append(&mut hop_relays);
            let o = Overlay::boot(&configs, Duration::from_secs(1)).await?;
            overlay = Some(o);
            entry
        }
    };

    let host = match spec.mode {
        Mode::Direct => "files",
        Mode::Overlay => "UNSTABLE",
    };
    let req = DownloadRequest {
        connect: entry,
        target: "/file.bin".into(),
        host: host.into(),
        headers: vec![],
        expected_sha256: Some(sha256_hex(&data)),
    };
    let mut rng = spec.rng();
    let rotation = p.slot * p.links;
    for i in 0..spec.trials {
        if spec.phase_jitter {
            tokio::time::sleep(uniform(&mut rng, rotation)).await;
        }
        let result = http_file_client(&req, &p.download).await;
        let mut t = Trial::new(i, spec.mode.as_str(), result.success, ms(result.elapsed));
        t.detail = json!(result);
        report.trials.push(t);
    }
    if let Some(o) = &overlay {
        report.config_versions = o.versions();
    }

    let ok = report.trials.iter().filter(|t| t.success).count();
    let n = report.trials.len();
    report.checks.push(match spec.mode {
        Mode::Direct => Check::new("every direct download fails", ok == 0, format!("{ok} of {n} succeeded")),
        Mode::Overlay => Check::new("every overlay download succeeds", ok == n && n > 0, format!("{ok} of {n} succeeded")),
    });
    drop(relays);
    Ok(report)
}

async fn tcp_relay(forward: SocketAddr, impairment: ImpairmentSpec) -> std::io::Result<Relay> {
    Relay::start(RelaySpec { listen: "127.0.0.1:0".parse().unwrap(), forward, transport: Transport::Tcp, impairment }).await
}

fn hop_cluster(name: &str, to: SocketAddr, retry: &RetryPolicy) -> ClusterSpec {
    let mut c = cluster(name, TunnelKind::PlainTcp, &[to]);
    c.retry = retry.clone();
    c
}

/// Client -> edge -> hop1 -[link 0]-> hop2 -[link 1]-> hop3 -[link 2]-> origin
/// proxy -> file server. Returns configs, the edge address and the relays.
async fn overlay_chain(
    p: &IntermittentParams,
    server: SocketAddr,
    schedule: &impl Fn(u32) -> ImpairmentSpec,
) -> std::io::Result<(Vec<NodeConfig>, SocketAddr, Vec<Relay>)> {
    let n = p.links as usize;
    // proxies 0 (edge) .. n+1 (origin side)
    let addrs: Vec<SocketAddr> = (0..n + 2).map(|_| free_addr()).collect();
    let mut relays = Vec::new();
    for i in 0..n {
        relays.push(tcp_relay(addrs[i + 2], schedule(i as u32)).await?);
    }
    let mut configs = Vec::new();
    let mut edge_retry = p.retry.clone();
    edge_retry.num_retries = 0;
    edge_retry.per_try_timeout = p.download.timeout * 2;
    let mut edge_rule = rule(&[], "core");
    edge_rule.append = headers(&[("user", "user1")]);
    configs.push(
        NodeBuilder::new("edge", 1)
            .listener(listener(addrs[0], ListenerMode::Http, "http"))
            .address_space("UNSTABLE", "core")
            .route(edge_rule)
            .cluster(hop_cluster("core", addrs[1], &edge_retry))
            .build(),
    );
    for i in 1..=n {
        configs.push(
            NodeBuilder::new(&format!("hop{i}"), 1)
                .listener(listener(addrs[i], ListenerMode::Http, "http"))
                .route(rule(&[("user", "user1")], "next"))
                .cluster(hop_cluster("next", relays[i - 1].local_addr(), &p.retry))
                .build(),
        );
    }
    configs.push(
        NodeBuilder::new("origin", 1)
            .listener(listener(addrs[n + 1], ListenerMode::Http, "http"))
            .route(rule(&[("user", "user1")], "files"))
            .cluster(hop_cluster("files", server, &p.retry))
            .build(),
    );
    Ok((configs, addrs[0], relays))
}
