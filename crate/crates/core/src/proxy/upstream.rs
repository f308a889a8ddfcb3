//! Opening the upstream side of a session, under the cluster's retry policy.

use std::io;

use bytes::BytesMut;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpStream, UdpSocket};

use super::io::{read_head, write_head, DatagramRx, DatagramTx};
use super::lb::ClusterState;
use super::retry::{execute_with_retry, AttemptError, Outcome};
use super::stats::ClusterStats;
use crate::model::{Endpoint, RetryOn, RetryPolicy, TunnelKind};
use crate::wire::{HeaderList, MessageHead};

/// What the session needs from upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    /// Send the request head and wait for the response head.
    Forward,
    /// A byte stream; tcp_connect clusters are asked with CONNECT.
    Bytes,
    /// A datagram path; udp_over_http clusters are asked with CONNECT-UDP.
    Datagrams,
}

pub struct OpenRequest<'a> {
    pub want: Want,
    pub method: &'a str,
    /// Request target, or `None` to use the chosen endpoint's authority.
    pub target: Option<&'a str>,
    pub headers: &'a HeaderList,
}

pub enum Upstream {
    Bytes { stream: TcpStream, leftover: BytesMut, response: Option<MessageHead> },
    Datagrams { rx: DatagramRx, tx: DatagramTx },
}

/// True when the cluster's tunnel kind can serve the request at all.
pub fn compatible(want: Want, kind: TunnelKind) -> bool {
    match want {
        Want::Forward | Want::Bytes => !kind.is_datagram(),
        Want::Datagrams => kind.is_datagram(),
    }
}

async fn dial(ep: &Endpoint) -> Result<TcpStream, AttemptError> {
    let addr = ep.resolve().await.map_err(|e| AttemptError::connect(&e))?;
    let s = TcpStream::connect(addr).await.map_err(|e| AttemptError::connect(&e))?;
    let _ = s.set_nodelay(true);
    Ok(s)
}

/// Sends `head` and reads the response head.
async fn exchange(stream: &mut TcpStream, head: &MessageHead) -> Result<(MessageHead, BytesMut), AttemptError> {
    write_head(stream, head).await.map_err(|e| AttemptError::io(&e))?;
    stream.flush().await.map_err(|e| AttemptError::io(&e))?;
    let mut buf = BytesMut::with_capacity(4096);
    match read_head(stream, &mut buf).await {
        Ok(Some(resp)) if !resp.is_request() => Ok((resp, buf)),
        Ok(Some(_)) => Err(AttemptError::new(RetryOn::Reset, "upstream sent a request")),
        Ok(None) => Err(AttemptError::new(RetryOn::RefusedStream, "upstream closed before answering")),
        Err(e) if e.kind() == io::ErrorKind::InvalidData => Err(AttemptError::new(RetryOn::Reset, e.to_string())),
        Err(e) => Err(AttemptError::io(&e)),
    }
}

async fn attempt(cluster: &ClusterState, req: &OpenRequest<'_>) -> Result<Upstream, AttemptError> {
    let (idx, ep) = cluster.select_endpoint();
    let kind = cluster.spec().tunnel_kind;
    let head = || {
        let target = req.target.map(str::to_string).unwrap_or_else(|| ep.authority());
        let method = match (req.want, kind) {
            (Want::Bytes, TunnelKind::TcpConnect) => "CONNECT",
            (Want::Datagrams, _) => "CONNECT-UDP",
            _ => req.method,
        };
        let mut h = MessageHead::request(method, target);
        h.headers = req.headers.clone();
        h
    };
    let result = match (req.want, kind) {
        (Want::Datagrams, TunnelKind::PlainUdp) => {
            let addr = ep.resolve().await.map_err(|e| AttemptError::connect(&e))?;
            let bind = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
            let sock = UdpSocket::bind(bind).await.map_err(|e| AttemptError::connect(&e))?;
            sock.connect(addr).await.map_err(|e| AttemptError::connect(&e))?;
            let sock = std::sync::Arc::new(sock);
            Ok(Upstream::Datagrams { rx: DatagramRx::Udp(sock.clone()), tx: DatagramTx::Udp(sock) })
        }
        (Want::Datagrams, _) => {
            let mut stream = dial(ep).await?;
            let (resp, leftover) = exchange(&mut stream, &head()).await?;
            match resp.status() {
                Some(200) => {
                    let (r, w) = stream.into_split();
                    Ok(Upstream::Datagrams { rx: DatagramRx::capsules(r, &leftover), tx: DatagramTx::Capsules(w) })
                }
                Some(s) => Err(AttemptError::tunnel_refused(s)),
                None => unreachable!("exchange returns responses"),
            }
        }
        (Want::Bytes, TunnelKind::TcpConnect) => {
            let mut stream = dial(ep).await?;
            let (resp, leftover) = exchange(&mut stream, &head()).await?;
            match resp.status() {
                Some(200) => Ok(Upstream::Bytes { stream, leftover, response: None }),
                Some(s) => Err(AttemptError::tunnel_refused(s)),
                None => unreachable!("exchange returns responses"),
            }
        }
        (Want::Bytes, _) => {
            let stream = dial(ep).await?;
            Ok(Upstream::Bytes { stream, leftover: BytesMut::new(), response: None })
        }
        (Want::Forward, _) => {
            let mut stream = dial(ep).await?;
            let (resp, leftover) = exchange(&mut stream, &head()).await?;
            match resp.status() {
                Some(s) if s >= 500 => Err(AttemptError::status(s)),
                _ => Ok(Upstream::Bytes { stream, leftover, response: Some(resp) }),
            }
        }
    };
    if matches!(&result, Err(e) if e.class == RetryOn::ConnectFailure) {
        cluster.mark_failed(idx);
    }
    result
}

fn record<T>(stats: &ClusterStats, policy: &RetryPolicy, out: &Outcome<T>) {
    stats.attempts.add(out.attempts.into());
    stats.retries.add((out.attempts - 1).into());
    if out.result.is_err() {
        stats.upstream_failures.inc();
        if out.exhausted(policy) {
            stats.retries_exhausted.inc();
        }
    }
}

/// Opens upstream with `1 + num_retries` attempts.
pub async fn open(cluster: &ClusterState, stats: &ClusterStats, req: &OpenRequest<'_>) -> Outcome<Upstream> {
    let policy = &cluster.spec().retry;
    let out = execute_with_retry(policy, |_| attempt(cluster, req)).await;
    record(stats, policy, &out);
    out
}

/// Dials a plain TCP cluster, making up to `max_connect_attempts` dials.
pub async fn dial_plain(cluster: &ClusterState, stats: &ClusterStats) -> Outcome<TcpStream> {
    let retry = &cluster.spec().retry;
    let policy = RetryPolicy {
        num_retries: retry.max_connect_attempts.saturating_sub(1),
        retry_on: [RetryOn::ConnectFailure].into(),
        ..retry.clone()
    };
    let out = execute_with_retry(&policy, |_| async {
        let (idx, ep) = cluster.select_endpoint();
        let r = dial(ep).await;
        if r.is_err() {
            cluster.mark_failed(idx);
        }
        r
    })
    .await;
    record(stats, &policy, &out);
    out
}
