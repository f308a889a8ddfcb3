//! Minimal JSON-over-HTTP admin endpoints served by proxies and the
//! controller, plus a client for them.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use bytes::BytesMut;
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;

use crate::proxy::io::{read_head, write_head};
use crate::wire::MessageHead;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdminRequest {
    pub method: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdminResponse {
    pub status: u16,
    pub body: Value,
}

impl AdminResponse {
    pub fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    pub fn not_found() -> Self {
        Self { status: 404, body: serde_json::json!({"error": "not found"}) }
    }
}

/// Serves admin requests until `cancel` fires. One request per connection.
pub async fn serve<H, Fut>(listener: TcpListener, cancel: CancellationToken, handler: H)
where
    H: Fn(AdminRequest) -> Fut + Clone + Send + Sync + 'static,
    Fut: Future<Output = AdminResponse> + Send,
{
    loop {
        let (mut stream, _) = tokio::select! {
            _ = cancel.cancelled() => return,
            r = listener.accept() => match r {
                Ok(x) => x,
                Err(_) => continue,
            },
        };
        let handler = handler.clone();
        tokio::spawn(async move {
            let mut buf = BytesMut::new();
            let Ok(Ok(Some(head))) = tokio::time::timeout(Duration::from_secs(10), read_head(&mut stream, &mut buf)).await
            else {
                return;
            };
            let (Some(method), Some(path)) = (head.method(), head.target()) else { return };
            let resp = handler(AdminRequest { method: method.to_string(), path: path.to_string() }).await;
            let body = serde_json::to_vec(&resp.body).unwrap_or_default();
            let head = MessageHead::response(resp.status)
                .with_header("content-type", "application/json")
                .with_header("content-length", body.len().to_string())
                .with_header("connection", "close");
            if write_head(&mut stream, &head).await.is_ok() {
                let _ = stream.write_all(&body).await;
                let _ = stream.shutdown().await;
            }
        });
    }
}

/// Issues one admin request and returns the status and decoded JSON body.
pub async fn request(addr: SocketAddr, method: &str, path: &str) -> io::Result<(u16, Value)> {
    let mut stream = TcpStream::connect(addr).await?;
    let head = MessageHead::request(method, path).with_header("host", addr.to_string());
    write_head(&mut stream, &head).await?;
    let mut buf = BytesMut::new();
    let resp = read_head(&mut stream, &mut buf).await?.ok_or(io::ErrorKind::UnexpectedEof)?;
    let status = resp.status().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "expected a response"))?;
    let mut body = buf.to_vec();
    stream.read_to_end(&mut body).await?;
    let value = if body.is_empty() { Value::Null } else { serde_json::from_slice(&body)? };
    Ok((status, value))
}
