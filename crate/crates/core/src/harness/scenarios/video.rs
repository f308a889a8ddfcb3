//! A sender streams sequenced datagrams to a viewer through a 1% loss
//! relay. Direct: the datagrams cross the relay as UDP. Overlay: the
//! sender's proxy carries them in a CONNECT-UDP tunnel whose TCP connection
//! crosses the relay, and the viewer's proxy hands them out as UDP again.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use serde_json::json;
use tokio::net::UdpSocket;

use super::{ms, Mode, ScenarioSpec};
use crate::harness::builders::{cluster, headers, listener, rule, NodeBuilder};
use crate::harness::overlay::Overlay;
use crate::harness::ports::free_addr;
use crate::harness::report::{Check, Report, Scaling, Trial};
use crate::harness::udp_stream::{udp_stream, StreamParams};
use crate::model::{ListenerMode, NodeConfig, PolicyRule, PolicyVerdict, TokenGrant, Transport, TunnelKind};
use crate::netsim::{ImpairmentSpec, Relay, RelaySpec};

pub const LOSS: f64 = 0.01;
const RELAY_LATENCY: Duration = Duration::from_millis(5);
const DIRECT_BAND: (f64, f64) = (0.005, 0.015);
const TOKEN: &str = "tok-user1";

fn impairment(seed: u64) -> ImpairmentSpec {
    ImpairmentSpec { latency: RELAY_LATENCY, ..ImpairmentSpec::lossy(LOSS, seed) }
}

pub async fn run(spec: &ScenarioSpec) -> std::io::Result<Report> {
    let stream = StreamParams::default();
    let mut report = Report::new(
        "video",
        spec.mode.as_str(),
        spec.seed,
        json!({ "loss_rate": LOSS, "relay_latency_ms": ms(RELAY_LATENCY), "stream": stream }),
    );
    report.scaling = vec![
        Scaling::new("media", "video file played by a streaming client", "sequenced datagrams with checksums", "frame errors become datagram loss"),
        Scaling::new("loss", "1% on the path", "1% per datagram at one relay", "seeded"),
        Scaling::new("volume", "one video", &format!("{} datagrams of {} bytes", stream.count, stream.payload), ""),
    ];

    for i in 0..spec.trials {
        let seed = spec.seed.wrapping_add(i as u64);
        let viewer = UdpSocket::bind("127.0.0.1:0").await?;
        let viewer_addr = viewer.local_addr()?;
        let sender = UdpSocket::bind("127.0.0.1:0").await?;
        let started = Instant::now();
        let (tally, versions) = match spec.mode {
            Mode::Direct => {
                let relay = Relay::start(RelaySpec {
                    listen: "127.0.0.1:0".parse().unwrap(),
                    forward: viewer_addr,
                    transport: Transport::Udp,
                    impairment: impairment(seed),
                })
                .await?;
                (udp_stream(&sender, relay.local_addr(), viewer, &stream).await?, Default::default())
            }
            Mode::Overlay => {
                let viewer_http = free_addr();
                let relay = Relay::start(RelaySpec {
                    listen: "127.0.0.1:0".parse().unwrap(),
                    forward: viewer_http,
                    transport: Transport::Tcp,
                    impairment: impairment(seed),
                })
                .await?;
                let ingest = free_addr();
                let configs = overlay_configs(ingest, relay.local_addr(), viewer_http, viewer_addr);
                let overlay = Overlay::boot(&configs, Duration::from_secs(1)).await?;
                let tally = udp_stream(&sender, ingest, viewer, &stream).await?;
                (tally, overlay.versions())
            }
        };
        let ok = match spec.mode {
            Mode::Overlay => tally.lost == 0,
            Mode::Direct => (DIRECT_BAND.0..=DIRECT_BAND.1).contains(&tally.loss_fraction()),
        };
        let mut t = Trial::new(i, spec.mode.as_str(), ok, ms(started.elapsed()));
        t.sent = Some(tally.sent);
        t.lost = Some(tally.lost);
        t.detail = json!(tally);
        report.trials.push(t);
        report.config_versions = versions;
    }

    let sent: u64 = report.trials.iter().filter_map(|t| t.sent).sum();
    let lost: u64 = report.trials.iter().filter_map(|t| t.lost).sum();
    let frac = if sent == 0 { 0.0 } else { lost as f64 / sent as f64 };
    report.checks.push(match spec.mode {
        Mode::Overlay => Check::new("no datagram lost", lost == 0 && sent > 0, format!("{lost} of {sent} lost")),
        Mode::Direct => Check::new(
            "loss within 0.5%..1.5%",
            (DIRECT_BAND.0..=DIRECT_BAND.1).contains(&frac),
            format!("{lost} of {sent} lost ({:.3}%)", frac * 100.0),
        ),
    });
    Ok(report)
}

/// Sender side proxy `src` ingests the stream; its route is gated on a
/// token that identifies the viewer, and the viewer proxy `dst` routes on
/// the identity the gate added.
pub fn overlay_configs(ingest: SocketAddr, relay: SocketAddr, viewer_http: SocketAddr, viewer: SocketAddr) -> Vec<NodeConfig> {
    let mut l = listener(ingest, ListenerMode::UdpIngest, "video");
    l.implicit_headers = headers(&[("service", "VIDEO"), ("authorization", &format!("Bearer {TOKEN}"))]);
    let mut gated = rule(&[("service", "VIDEO")], "to-viewer");
    gated.policy_gate = Some("video-auth".into());
    let mut policy = PolicyRule { id: "video-auth".into(), tokens: Default::default() };
    policy
        .tokens
        .insert(TOKEN.into(), TokenGrant { decision: PolicyVerdict::Allow, append: headers(&[("user", "user1")]) });
    let src = NodeBuilder::new("video-src", 1)
        .listener(l)
        .route(gated)
        .cluster(cluster("to-viewer", TunnelKind::UdpOverHttp, &[relay]))
        .policy(policy)
        .build();
    let dst = NodeBuilder::new("video-dst", 1)
        .listener(listener(viewer_http, ListenerMode::Http, "http"))
        .route(rule(&[("user", "user1")], "viewer"))
        .cluster(cluster("viewer", TunnelKind::PlainUdp, &[viewer]))
        .build();
    vec![src, dst]
}
