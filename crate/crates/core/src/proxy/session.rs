//! Per-connection and per-flow handlers for the three listener modes.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tracing::debug;

use super::engine::{Epoch, SessionGuard, Shared};
use super::io::{read_head, reset, respond, splice, write_head, DatagramRx, DatagramTx};
use super::routing::{outgoing_headers, route, RouteDecision, RoutingInput};
use super::stats::ListenerStats;
use super::upstream::{compatible, dial_plain, open, OpenRequest, Upstream, Want};
use crate::model::{HeaderMap, ListenerSpec, TunnelKind};
use crate::policy::request_token;
use crate::wire::{HeaderList, MessageHead};

/// Idle limit for datagram sessions whose cluster sets none.
pub const DEFAULT_DATAGRAM_IDLE: Duration = Duration::from_secs(30);
const HEAD_TIMEOUT: Duration = Duration::from_secs(30);
const INGEST_QUEUE: usize = 1024;

enum Refusal {
    NoRoute,
    Denied,
}

/// Routes `input`, applying the matched rule's policy gate. On allow the
/// policy's headers are merged into `input` before the decision is used.
fn decide(epoch: &Epoch, shared: &Shared, input: &mut RoutingInput) -> Result<RouteDecision, Refusal> {
    let cfg = &epoch.cfg;
    let decision = match route(input, &cfg.routes, &cfg.address_spaces) {
        Ok(d) => d,
        Err(_) => {
            shared.stats.no_route.inc();
            return Err(Refusal::NoRoute);
        }
    };
    if let Some(gate) = &decision.policy_gate {
        let verdict = epoch.policies.evaluate(gate, request_token(&input.headers), &input.headers);
        if !verdict.allow {
            shared.stats.policy_denied.inc();
            return Err(Refusal::Denied);
        }
        input.headers.merge_from(&verdict.append);
    }
    shared.stats.route_matched.inc();
    Ok(decision)
}

fn header_list(map: &HeaderMap) -> HeaderList {
    map.iter().collect()
}

fn authority_of(target: &str) -> Option<&str> {
    let rest = target.strip_prefix("http://")?;
    Some(rest.split('/').next().unwrap_or(rest))
}

pub(crate) async fn handle_http(
    mut down: TcpStream,
    spec: ListenerSpec,
    epoch: Arc<Epoch>,
    shared: Arc<Shared>,
    lstats: Arc<ListenerStats>,
) {
    let mut buf = BytesMut::with_capacity(4096);
    let head = match tokio::time::timeout(HEAD_TIMEOUT, read_head(&mut down, &mut buf)).await {
        Ok(Ok(Some(h))) if h.is_request() => h,
        Ok(Ok(None)) => return,
        _ => {
            shared.stats.bad_requests.inc();
            let _ = respond(&mut down, 400).await;
            return;
        }
    };
    let method = head.method().unwrap_or_default().to_string();
    let target = head.target().unwrap_or_default().to_string();

    let mut headers = HeaderMap::new();
    for (k, v) in head.headers.iter() {
        if !headers.contains(k) {
            headers.insert(k, v);
        }
    }
    headers.merge_from(&spec.implicit_headers);
    if method.starts_with("CONNECT") {
        headers.insert("host", target.clone());
    } else if let Some(auth) = authority_of(&target) {
        headers.insert("host", auth);
    }
    let mut input = RoutingInput { port_tag: spec.port_tag.clone(), headers };
    let decision = match decide(&epoch, &shared, &mut input) {
        Ok(d) => d,
        Err(Refusal::NoRoute) => {
            lstats.no_route.inc();
            let _ = respond(&mut down, 404).await;
            return;
        }
        Err(Refusal::Denied) => {
            let _ = respond(&mut down, 403).await;
            return;
        }
    };
    let Some(cluster) = epoch.cluster(&decision.cluster) else {
        let _ = respond(&mut down, 502).await;
        return;
    };
    let kind = cluster.spec().tunnel_kind;
    let want = match method.as_str() {
        "CONNECT" => Want::Bytes,
        "CONNECT-UDP" => Want::Datagrams,
        _ => Want::Forward,
    };
    let cstats = shared.stats.cluster(&decision.cluster);
    if !compatible(want, kind) {
        debug!(%method, kind = kind.as_str(), "tunnel kind cannot carry this request");
        cstats.upstream_failures.inc();
        let _ = respond(&mut down, 502).await;
        return;
    }
    shared.stats.session_started(kind);
    cstats.sessions.inc();

    // everything received, with this node's values replacing incoming ones
    let mut out_headers = head.headers.clone();
    for (k, v) in outgoing_headers(&input.headers, &decision).iter() {
        if out_headers.get(k) != Some(v) {
            out_headers.set(k, v);
        }
    }
    let req = OpenRequest { want, method: &method, target: Some(&target), headers: &out_headers };
    let outcome = open(&cluster, &cstats, &req).await;
    let upstream = match outcome.result {
        Ok(u) => u,
        Err(e) => {
            debug!(cluster = %decision.cluster, attempts = outcome.attempts, "upstream failed: {e}");
            let _ = respond(&mut down, e.downstream_status()).await;
            return;
        }
    };
    let idle = cluster.spec().idle_timeout;
    match upstream {
        Upstream::Datagrams { rx, tx } => {
            if respond(&mut down, 200).await.is_err() {
                return;
            }
            let (r, w) = down.into_split();
            let totals = super::io::pump_datagrams(
                (DatagramRx::capsules(r, &buf), DatagramTx::Capsules(w)),
                (rx, tx),
                idle.unwrap_or(DEFAULT_DATAGRAM_IDLE),
                &epoch.cancel,
            )
            .await;
            cstats.datagrams_up.add(totals.a_to_b);
            cstats.datagrams_down.add(totals.b_to_a);
        }
        Upstream::Bytes { mut stream, leftover, response } => {
            let first = match &response {
                Some(resp) => write_head(&mut down, resp).await,
                None => write_head(&mut down, &MessageHead::response(200)).await,
            };
            if first.is_err()
                || down.write_all(&leftover).await.is_err()
                || stream.write_all(&buf).await.is_err()
            {
                return;
            }
            let (totals, _) = splice(&mut down, &mut stream, idle, &epoch.cancel).await;
            cstats.bytes_up.add(totals.a_to_b + buf.len() as u64);
            cstats.bytes_down.add(totals.b_to_a + leftover.len() as u64);
        }
    }
}

pub(crate) async fn handle_tcp_forward(
    down: TcpStream,
    spec: ListenerSpec,
    epoch: Arc<Epoch>,
    shared: Arc<Shared>,
    lstats: Arc<ListenerStats>,
) {
    let mut input = RoutingInput { port_tag: spec.port_tag.clone(), headers: spec.implicit_headers.clone() };
    let Ok(decision) = decide(&epoch, &shared, &mut input) else {
        lstats.no_route.inc();
        return;
    };
    let Some(cluster) = epoch.cluster(&decision.cluster) else { return };
    let kind = cluster.spec().tunnel_kind;
    let cstats = shared.stats.cluster(&decision.cluster);
    if kind.is_datagram() {
        lstats.dropped.inc();
        return;
    }
    shared.stats.session_started(kind);
    cstats.sessions.inc();
    let mut down = down;
    let (mut up, leftover) = if kind == TunnelKind::PlainTcp {
        match dial_plain(&cluster, &cstats).await.result {
            Ok(s) => (s, BytesMut::new()),
            Err(_) => return reset(down),
        }
    } else {
        let headers = header_list(&outgoing_headers(&input.headers, &decision));
        let req = OpenRequest { want: Want::Bytes, method: "CONNECT", target: None, headers: &headers };
        match open(&cluster, &cstats, &req).await.result {
            Ok(Upstream::Bytes { stream, leftover, .. }) => (stream, leftover),
            _ => return reset(down),
        }
    };
    if down.write_all(&leftover).await.is_err() {
        return;
    }
    let (totals, _) = splice(&mut down, &mut up, cluster.spec().idle_timeout, &epoch.cancel).await;
    cstats.bytes_up.add(totals.a_to_b);
    cstats.bytes_down.add(totals.b_to_a + leftover.len() as u64);
}

struct Flow {
    id: u64,
    tx: mpsc::Sender<Bytes>,
}

/// Receive loop of a udp_ingest listener. Each source address gets its own
/// session, routed once when its first datagram arrives.
pub(crate) async fn run_udp_ingest(sock: Arc<UdpSocket>, key: String, shared: Arc<Shared>) {
    let flows: Arc<Mutex<HashMap<SocketAddr, Flow>>> = Arc::default();
    let next_id = AtomicU64::new(0);
    let lstats = shared.stats.listener(&key);
    let mut buf = vec![0u8; 65536];
    loop {
        let (n, peer) = match sock.recv_from(&mut buf).await {
            Ok(x) => x,
            Err(e) => {
                debug!("udp ingest recv: {e}");
                continue;
            }
        };
        let datagram = Bytes::copy_from_slice(&buf[..n]);
        let mut datagram = Some(datagram);
        {
            let map = flows.lock().unwrap();
            if let Some(flow) = map.get(&peer) {
                match flow.tx.try_send(datagram.take().unwrap()) {
                    Ok(()) => {}
                    Err(mpsc::error::TrySendError::Full(_)) => lstats.dropped.inc(),
                    // session ended, start another
                    Err(mpsc::error::TrySendError::Closed(d)) => datagram = Some(d),
                }
            }
        }
        let Some(datagram) = datagram else { continue };

        let epoch = shared.epoch();
        let Some(spec) = epoch.listener(&key).cloned() else {
            lstats.dropped.inc();
            continue;
        };
        let mut input = RoutingInput { port_tag: spec.port_tag.clone(), headers: spec.implicit_headers.clone() };
        let Ok(decision) = decide(&epoch, &shared, &mut input) else {
            lstats.no_route.inc();
            lstats.dropped.inc();
            continue;
        };
        let Some(cluster) = epoch.cluster(&decision.cluster) else { continue };
        if !cluster.spec().tunnel_kind.is_datagram() {
            lstats.dropped.inc();
            continue;
        }
        let (tx, rx) = mpsc::channel(INGEST_QUEUE);
        let _ = tx.try_send(datagram);
        let id = next_id.fetch_add(1, Ordering::Relaxed);
        flows.lock().unwrap().insert(peer, Flow { id, tx });
        lstats.accepted.inc();
        let guard = epoch.session();
        let (sock, shared, flows, lstats) = (sock.clone(), shared.clone(), flows.clone(), lstats.clone());
        let headers = header_list(&outgoing_headers(&input.headers, &decision));
        tokio::spawn(async move {
            lstats.active.inc();
            let cancel = guard.epoch().cancel.clone();
            tokio::select! {
                _ = udp_session(rx, sock, peer, headers, &decision, guard, &shared) => {}
                _ = cancel.cancelled() => {}
            }
            lstats.active.dec();
            let mut map = flows.lock().unwrap();
            if map.get(&peer).is_some_and(|f| f.id == id) {
                map.remove(&peer);
            }
        });
    }
}

async fn udp_session(
    rx: mpsc::Receiver<Bytes>,
    sock: Arc<UdpSocket>,
    peer: SocketAddr,
    headers: HeaderList,
    decision: &RouteDecision,
    guard: SessionGuard,
    shared: &Shared,
) {
    let epoch = guard.epoch();
    let Some(cluster) = epoch.cluster(&decision.cluster) else { return };
    let cstats = shared.stats.cluster(&decision.cluster);
    shared.stats.session_started(cluster.spec().tunnel_kind);
    cstats.sessions.inc();
    let req = OpenRequest { want: Want::Datagrams, method: "CONNECT-UDP", target: None, headers: &headers };
    let outcome = open(&cluster, &cstats, &req).await;
    let Ok(Upstream::Datagrams { rx: up_rx, tx: up_tx }) = outcome.result else {
        debug!(cluster = %decision.cluster, "datagram tunnel failed");
        return;
    };
    let totals = super::io::pump_datagrams(
        (DatagramRx::Channel(rx), DatagramTx::UdpTo(sock, peer)),
        (up_rx, up_tx),
        cluster.spec().idle_timeout.unwrap_or(DEFAULT_DATAGRAM_IDLE),
        &epoch.cancel,
    )
    .await;
    cstats.datagrams_up.add(totals.a_to_b);
    cstats.datagrams_down.add(totals.b_to_a);
}
