//! A user's packets to a personal server enter the overlay through a split
//! tunnel. Pings run while two config updates move the path closer: first
//! the ingress proxy, then the server the ingress forwards to.
//!
//! ```text
//! stage 0: pump -> user -[far tcp]-> ingress-far -> server-far
//! stage 1: pump -> user -[near tcp]-> ingress-near -[far udp]-> server-far
//! stage 2: pump -> user -[near tcp]-> ingress-near -> server-near
//! ```
//!
//! Tunnels idle out between probes, so every probe pays for a tunnel
//! handshake on the user's leg. That is what makes stage 1 faster than
//! stage 0 even though the server is as far away as before.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use tokio::net::UdpSocket;

use super::{ms, ScenarioSpec};
use crate::harness::builders::{cluster, headers, listener, rule, NodeBuilder};
use crate::harness::overlay::Overlay;
use crate::harness::ping::{ping_over_tunnel, PingParams};
use crate::harness::ports::free_addr;
use crate::harness::report::{Check, Report, Scaling, Trial};
use crate::model::{ClusterSpec, ListenerMode, NodeConfig, Transport, TunnelKind};
use crate::netsim::{ImpairmentSpec, Relay, RelaySpec};
use crate::splitnet::{injection_pair, run_echo_endpoint, EchoEndpointStats, SplitTable, TunnelClient};

#[derive(Debug, Clone, Serialize)]
pub struct IpReconfigParams {
    pub far_latency: Duration,
    pub near_latency: Duration,
    pub probes_per_stage: u16,
    pub probe_interval: Duration,
    pub probe_timeout: Duration,
    pub tunnel_idle: Duration,
    pub poll_interval: Duration,
    pub drain_time: Duration,
    pub min_drop_ms: f64,
    pub max_reconfig: Duration,
}

impl Default for IpReconfigParams {
    fn default() -> Self {
        Self {
            far_latency: Duration::from_millis(150),
            near_latency: Duration::from_millis(10),
            probes_per_stage: 10,
            probe_interval: Duration::from_millis(1500),
            probe_timeout: Duration::from_secs(3),
            tunnel_idle: Duration::from_millis(400),
            poll_interval: Duration::from_secs(5),
            drain_time: Duration::from_secs(5),
            min_drop_ms: 50.0,
            max_reconfig: Duration::from_secs(10),
        }
    }
}

const USER_SRC: Ipv4Addr = Ipv4Addr::new(10, 8, 0, 2);
const PERSONAL: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);

async fn relay(forward: SocketAddr, transport: Transport, latency: Duration) -> std::io::Result<Relay> {
    Relay::start(RelaySpec {
        listen: "127.0.0.1:0".parse().unwrap(),
        forward,
        transport,
        impairment: ImpairmentSpec::delayed(latency),
    })
    .await
}

async fn echo_server() -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let sock = UdpSocket::bind("127.0.0.1:0").await?;
    let addr = sock.local_addr()?;
    Ok((addr, tokio::spawn(run_echo_endpoint(sock, Arc::new(EchoEndpointStats::default())))))
}

fn with_idle(mut c: ClusterSpec, idle: Duration) -> ClusterSpec {
    c.idle_timeout = Some(idle);
    c
}

struct Ports {
    ingest: [SocketAddr; 3],
    ingress_far: SocketAddr,
    ingress_near: SocketAddr,
}

fn user_config(p: &IpReconfigParams, ports: &Ports, version: u64, ingress: SocketAddr) -> NodeConfig {
    let tags = [("ip1", "10.0.0.1"), ("ip2", "10.0.0.2"), ("net3", "128.252.0.0")];
    let mut b = NodeBuilder::new("user", version).drain(p.drain_time);
    for (addr, (tag, ip)) in ports.ingest.iter().zip(tags) {
        let mut l = listener(*addr, ListenerMode::UdpIngest, tag);
        l.implicit_headers = headers(&[("user", "user2"), ("ipaddress", ip)]);
        b = b.listener(l);
    }
    b.route(rule(&[], "ingress"))
        .cluster(with_idle(cluster("ingress", TunnelKind::UdpOverHttp, &[ingress]), p.tunnel_idle))
        .build()
}

fn ingress_config(p: &IpReconfigParams, id: &str, bind: SocketAddr, version: u64, server: SocketAddr) -> NodeConfig {
    NodeBuilder::new(id, version)
        .drain(p.drain_time)
        .listener(listener(bind, ListenerMode::Http, "http"))
        .route(rule(&[("user", "user2"), ("ipaddress", "10.0.0.1")], "personal"))
        .cluster(with_idle(cluster("personal", TunnelKind::PlainUdp, &[server]), p.tunnel_idle))
        .build()
}

pub async fn run(spec: &ScenarioSpec) -> std::io::Result<Report> {
    run_with(spec, &IpReconfigParams::default()).await
}

pub async fn run_with(spec: &ScenarioSpec, p: &IpReconfigParams) -> std::io::Result<Report> {
    let mut report = Report::new("ip_reconfig", spec.mode.as_str(), spec.seed, json!(p));
    report.scaling = vec![
        Scaling::new("far leg", "transatlantic path", &format!("+{:?} each way", p.far_latency), "relay latency"),
        Scaling::new("near leg", "same-continent path", &format!("+{:?} each way", p.near_latency), "relay latency"),
        Scaling::new("probe interval", "10 s", &format!("{:?}", p.probe_interval), "still longer than the tunnel idle timeout"),
        Scaling::new("tunnel idle timeout", "3 s", &format!("{:?}", p.tunnel_idle), "every probe opens a fresh tunnel"),
        Scaling::new("poll interval", "5 s", &format!("{:?}", p.poll_interval), "unchanged"),
        Scaling::new("absolute RTTs", "382, 206, 80 ms", "not reproduced", "only the decreasing staircase is checked"),
    ];

    let (server_far, far_task) = echo_server().await?;
    let (server_near, near_task) = echo_server().await?;
    let ports = Ports { ingest: [free_addr(), free_addr(), free_addr()], ingress_far: free_addr(), ingress_near: free_addr() };
    let far_tcp = relay(ports.ingress_far, Transport::Tcp, p.far_latency).await?;
    let near_tcp = relay(ports.ingress_near, Transport::Tcp, p.near_latency).await?;
    let far_udp = relay(server_far, Transport::Udp, p.far_latency).await?;

    let configs = vec![
        user_config(p, &ports, 1, far_tcp.local_addr()),
        ingress_config(p, "ingress-far", ports.ingress_far, 1, server_far),
        ingress_config(p, "ingress-near", ports.ingress_near, 1, far_udp.local_addr()),
    ];
    let overlay = Overlay::boot(&configs, p.poll_interval).await?;

    let table = SplitTable::new([
        ("10.0.0.1/32".parse().unwrap(), ports.ingest[0].port()),
        ("10.0.0.2/32".parse().unwrap(), ports.ingest[1].port()),
        ("128.252.0.0/16".parse().unwrap(), ports.ingest[2].port()),
    ])
    .expect("canonical prefixes");
    let (mut handle, source) = injection_pair(64);
    let _pump = TunnelClient::spawn(source, table, ports.ingest[0].ip()).await?;

    let ping = PingParams {
        src: USER_SRC,
        dst: PERSONAL,
        identifier: (spec.seed & 0xffff) as u16,
        count: p.probes_per_stage,
        interval: p.probe_interval,
        timeout: p.probe_timeout,
    };
    let updates = [
        user_config(p, &ports, 2, near_tcp.local_addr()),
        ingress_config(p, "ingress-near", ports.ingress_near, 2, server_near),
    ];
    let mut index = 0;
    let mut seq = 0u16;
    let mut reconfig_ok = true;
    for stage in 0..=updates.len() {
        if stage > 0 {
            let cfg = &updates[stage - 1];
            overlay.publish(cfg)?;
            let took = overlay.wait_version(&cfg.node_id, cfg.version, p.max_reconfig * 2).await;
            let mut t = Trial::new(index, &format!("update{stage}"), took.is_some_and(|d| d < p.max_reconfig), 0.0);
            t.reconfig_ms = took.map(ms);
            t.duration_ms = took.map(ms).unwrap_or(ms(p.max_reconfig * 2));
            t.detail = json!({ "node": cfg.node_id, "version": cfg.version });
            reconfig_ok &= t.success;
            report.trials.push(t);
            index += 1;
        }
        for probe in ping_over_tunnel(&mut handle, &ping, seq).await {
            let mut t = Trial::new(index, &format!("stage{stage}"), probe.rtt_ms.is_some(), probe.rtt_ms.unwrap_or(0.0));
            t.rtt_ms = probe.rtt_ms;
            t.detail = json!({ "sequence": probe.sequence });
            report.trials.push(t);
            index += 1;
        }
        seq = seq.wrapping_add(p.probes_per_stage);
    }
    report.config_versions = overlay.versions();

    let probes: Vec<&Trial> = report.trials.iter().filter(|t| t.label.starts_with("stage")).collect();
    let lost = probes.iter().filter(|t| !t.success).count();
    report.checks.push(Check::new("no probe lost", lost == 0, format!("{lost} of {} probes lost", probes.len())));
    let means: Vec<f64> = (0..=updates.len())
        .map(|s| {
            let rtts: Vec<f64> =
                probes.iter().filter(|t| t.label == format!("stage{s}")).filter_map(|t| t.rtt_ms).collect();
            rtts.iter().sum::<f64>() / rtts.len().max(1) as f64
        })
        .collect();
    let drops_ok = means.windows(2).all(|w| w[0] - w[1] >= p.min_drop_ms);
    report.checks.push(Check::new(
        "mean RTT drops after each update",
        drops_ok,
        format!("stage means {:?} ms, required drop {} ms", means.iter().map(|m| m.round()).collect::<Vec<_>>(), p.min_drop_ms),
    ));
    report.checks.push(Check::new(
        "each update applied in time",
        reconfig_ok,
        format!("limit {:?}", p.max_reconfig),
    ));
    far_task.abort();
    near_task.abort();
    Ok(report)
}
