//! Small upstream servers used by scenarios and tests.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::BytesMut;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio_util::sync::CancellationToken;

use crate::proxy::io::{read_head, reset, write_head};
use crate::wire::MessageHead;

/// A running stub; dropping it stops the server.
pub struct Stub {
    pub addr: SocketAddr,
    hits: Arc<AtomicU64>,
    cancel: CancellationToken,
}

impl Stub {
    /// Connections accepted (TCP) or datagrams received (UDP).
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

pub(crate) async fn serve_tcp<F, Fut>(bind: SocketAddr, per_conn: F) -> io::Result<Stub>
where
    F: Fn(TcpStream) -> Fut + Send + Sync + 'static,
    Fut: std::future::Future<Output = ()> + Send + 'static,
{
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let hits = Arc::new(AtomicU64::new(0));
    let cancel = CancellationToken::new();
    let (h, c) = (hits.clone(), cancel.clone());
    tokio::spawn(async move {
        loop {
            let stream = tokio::select! {
                _ = c.cancelled() => return,
                r = listener.accept() => match r {
                    Ok((s, _)) => s,
                    Err(_) => continue,
                },
            };
            h.fetch_add(1, Ordering::SeqCst);
            let c2 = c.clone();
            let work = per_conn(stream);
            tokio::spawn(async move {
                tokio::select! {
                    _ = work => {}
                    _ = c2.cancelled() => {}
                }
            });
        }
    });
    Ok(Stub { addr, hits, cancel })
}

/// Answers every request with 200 and a JSON body describing it:
/// `{"stub": id, "method", "target", "headers": {...}}`.
pub async fn header_echo(bind: SocketAddr, id: &str) -> io::Result<Stub> {
    let id = id.to_string();
    serve_tcp(bind, move |mut s| {
        let id = id.clone();
        async move {
            let mut buf = BytesMut::new();
            let Ok(Some(head)) = read_head(&mut s, &mut buf).await else { return };
            let headers: BTreeMap<&str, &str> = head.headers.iter().collect();
            let body = serde_json::to_vec(&serde_json::json!({
                "stub": id,
                "method": head.method(),
                "target": head.target(),
                "headers": headers,
            }))
            .unwrap();
            let resp = MessageHead::response(200)
                .with_header("x-stub", id.as_str())
                .with_header("content-length", body.len().to_string())
                .with_header("connection", "close");
            if write_head(&mut s, &resp).await.is_ok() {
                let _ = s.write_all(&body).await;
                let _ = s.shutdown().await;
            }
        }
    })
    .await
}

pub async fn tcp_echo(bind: SocketAddr) -> io::Result<Stub> {
    serve_tcp(bind, |mut s| async move {
        let (mut r, mut w) = s.split();
        let _ = tokio::io::copy(&mut r, &mut w).await;
        let _ = w.shutdown().await;
    })
    .await
}

/// Upstream failure modes observable by the proxy's retry logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Misbehavior {
    /// Close after reading the request, before answering.
    CloseBeforeResponse,
    /// Reset the connection after reading the request.
    Reset,
    /// Answer with this status.
    Status(u16),
}

/// Reads one request head per connection and misbehaves as told.
pub async fn misbehaving(bind: SocketAddr, how: Misbehavior) -> io::Result<Stub> {
    serve_tcp(bind, move |mut s| async move {
        let mut buf = BytesMut::new();
        if !matches!(read_head(&mut s, &mut buf).await, Ok(Some(_))) {
            return;
        }
        match how {
            Misbehavior::CloseBeforeResponse => {
                let _ = s.shutdown().await;
                let mut sink = [0u8; 64];
                let _ = s.read(&mut sink).await;
            }
            Misbehavior::Reset => reset(s),
            Misbehavior::Status(code) => {
                let head = MessageHead::response(code).with_header("content-length", "0");
                let _ = write_head(&mut s, &head).await;
                let _ = s.shutdown().await;
            }
        }
    })
    .await
}

/// Echoes every datagram back to its sender.
pub async fn udp_echo(bind: SocketAddr) -> io::Result<Stub> {
    let sock = UdpSocket::bind(bind).await?;
    let addr = sock.local_addr()?;
    let hits = Arc::new(AtomicU64::new(0));
    let cancel = CancellationToken::new();
    let (h, c) = (hits.clone(), cancel.clone());
    tokio::spawn(async move {
        let mut buf = vec![0u8; 65536];
        loop {
            let (n, from) = tokio::select! {
                _ = c.cancelled() => return,
                r = sock.recv_from(&mut buf) => match r {
                    Ok(x) => x,
                    Err(_) => continue,
                },
            };
            h.fetch_add(1, Ordering::SeqCst);
            let _ = sock.send_to(&buf[..n], from).await;
        }
    });
    Ok(Stub { addr, hits, cancel })
}

/// Sends one request and reads the whole response until the server closes.
pub async fn http_exchange(addr: SocketAddr, head: &MessageHead) -> io::Result<(MessageHead, Vec<u8>)> {
    let mut s = TcpStream::connect(addr).await?;
    write_head(&mut s, head).await?;
    let mut buf = BytesMut::new();
    let resp = read_head(&mut s, &mut buf).await?.ok_or(io::ErrorKind::UnexpectedEof)?;
    let mut body = buf.to_vec();
    s.read_to_end(&mut body).await?;
    Ok((resp, body))
}
