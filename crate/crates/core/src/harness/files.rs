//! Byte-range file server and a resuming download client.

use std::io;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, Instant};

use bytes::BytesMut;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tracing::debug;

use super::stubs::{serve_tcp, Stub};
use crate::proxy::io::{read_head, write_head};
use crate::wire::MessageHead;

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Deterministic file contents for a given seed.
pub fn synthetic_file(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut out = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteRange {
    From(u64),
    Span(u64, u64),
}

/// Parses `bytes=N-` and `bytes=N-M`; other forms are not supported.
pub fn parse_range(v: &str) -> Option<ByteRange> {
    let spec = v.trim().strip_prefix("bytes=")?;
    let (a, b) = spec.split_once('-')?;
    let start = a.trim().parse().ok()?;
    match b.trim() {
        "" => Some(ByteRange::From(start)),
        end => {
            let end: u64 = end.parse().ok()?;
            (end >= start).then_some(ByteRange::Span(start, end))
        }
    }
}

fn request_path(target: &str) -> &str {
    let path = match target.strip_prefix("http://") {
        Some(rest) => rest.find('/').map_or("/", |i| &rest[i..]),
        None => target,
    };
    path.split('?').next().unwrap_or(path)
}

fn resolve(root: &Path, target: &str) -> Option<PathBuf> {
    let rel = Path::new(request_path(target).trim_start_matches('/'));
    if rel.as_os_str().is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

async fn respond_empty(s: &mut TcpStream, status: u16, extra: &[(&str, String)]) {
    let mut head = MessageHead::response(status).with_header("content-length", "0").with_header("connection", "close");
    for (k, v) in extra {
        head = head.with_header(k, v.as_str());
    }
    let _ = write_head(s, &head).await;
    let _ = s.shutdown().await;
}

/// Serves files under `root` with Range support, one request per
/// connection.
pub async fn file_server(bind: SocketAddr, root: PathBuf) -> io::Result<Stub> {
    serve_tcp(bind, move |mut s| {
        let root = root.clone();
        async move {
            let mut buf = BytesMut::new();
            let Ok(Some(head)) = read_head(&mut s, &mut buf).await else { return };
            if head.method() != Some("GET") {
                return respond_empty(&mut s, 405, &[]).await;
            }
            let Some(path) = head.target().and_then(|t| resolve(&root, t)) else {
                return respond_empty(&mut s, 404, &[]).await;
            };
            let Ok(data) = tokio::fs::read(&path).await else {
                return respond_empty(&mut s, 404, &[]).await;
            };
            let len = data.len() as u64;
            let range = head.headers.get("range").map(parse_range);
            let (status, start, end) = match range {
                None => (200, 0, len),
                Some(None) => return respond_empty(&mut s, 416, &[("content-range", format!("bytes */{len}"))]).await,
                Some(Some(r)) => {
                    let (a, b) = match r {
                        ByteRange::From(a) => (a, len),
                        ByteRange::Span(a, b) => (a, (b + 1).min(len)),
                    };
                    if a >= len {
                        return respond_empty(&mut s, 416, &[("content-range", format!("bytes */{len}"))]).await;
                    }
                    (206, a, b)
                }
            };
            let mut resp = MessageHead::response(status)
                .with_header("content-length", (end - start).to_string())
                .with_header("connection", "close");
            if status == 206 {
                resp = resp.with_header("content-range", format!("bytes {start}-{}/{len}", end - 1));
            }
            if write_head(&mut s, &resp).await.is_ok() {
                let _ = s.write_all(&data[start as usize..end as usize]).await;
                let _ = s.shutdown().await;
            }
        }
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownloadParams {
    pub tries: u32,
    /// Cap of the linear backoff between tries: 1s, 2s, ... up to this.
    pub waitretry: Duration,
    /// Applies to the connect and to every read.
    pub timeout: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownloadResult {
    pub success: bool,
    pub tries: u32,
    pub bytes: u64,
    pub elapsed: Duration,
    pub sha256: Option<String>,
    pub last_error: Option<String>,
}

/// What to fetch and through which first hop.
#[derive(Debug, Clone)]
pub struct DownloadRequest {
    pub connect: SocketAddr,
    pub target: String,
    pub host: String,
    pub headers: Vec<(String, String)>,
    pub expected_sha256: Option<String>,
}

enum TryEnd {
    Complete,
    Partial(String),
    Fatal(String),
}

/// Downloads with resume: a failed try keeps what arrived and the next try
/// asks for the rest with a Range header. Succeeds iff the full length
/// arrived and, when given, the digest matches.
pub async fn http_file_client(req: &DownloadRequest, params: &DownloadParams) -> DownloadResult {
    let start = Instant::now();
    let mut body = Vec::new();
    let mut total: Option<u64> = None;
    let mut last_error = None;
    let mut tries = 0;
    while tries < params.tries {
        if tries > 0 {
            let wait = Duration::from_secs(tries as u64).min(params.waitretry);
            tokio::time::sleep(wait).await;
        }
        tries += 1;
        match one_try(req, params.timeout, &mut body, &mut total).await {
            TryEnd::Complete => {
                let digest = sha256_hex(&body);
                let ok = req.expected_sha256.as_ref().is_none_or(|d| *d == digest);
                return DownloadResult {
                    success: ok,
                    tries,
                    bytes: body.len() as u64,
                    elapsed: start.elapsed(),
                    sha256: Some(digest),
                    last_error: (!ok).then(|| "digest mismatch".to_string()),
                };
            }
            TryEnd::Partial(e) => {
                debug!(tries, have = body.len(), "download try failed: {e}");
                last_error = Some(e);
            }
            TryEnd::Fatal(e) => {
                last_error = Some(e);
                break;
            }
        }
    }
    DownloadResult { success: false, tries, bytes: body.len() as u64, elapsed: start.elapsed(), sha256: None, last_error }
}

async fn one_try(req: &DownloadRequest, timeout: Duration, body: &mut Vec<u8>, total: &mut Option<u64>) -> TryEnd {
    let io = |e: io::Error| TryEnd::Partial(e.to_string());
    let within = |what: &'static str| move |_| TryEnd::Partial(format!("{what} timed out"));
    let mut s = match tokio::time::timeout(timeout, TcpStream::connect(req.connect)).await {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return io(e),
        Err(e) => return within("connect")(e),
    };
    let mut head = MessageHead::request("GET", req.target.as_str()).with_header("host", req.host.as_str());
    for (k, v) in &req.headers {
        head = head.with_header(k, v.as_str());
    }
    let offset = body.len() as u64;
    if offset > 0 {
        head = head.with_header("range", format!("bytes={offset}-"));
    }
    if let Err(e) = write_head(&mut s, &head).await {
        return io(e);
    }
    let mut buf = BytesMut::new();
    let resp = match tokio::time::timeout(timeout, read_head(&mut s, &mut buf)).await {
        Ok(Ok(Some(h))) => h,
        Ok(Ok(None)) => return TryEnd::Partial("closed before response".into()),
        Ok(Err(e)) => return io(e),
        Err(e) => return within("response")(e),
    };
    let status = resp.status().unwrap_or(0);
    let length: Option<u64> = resp.headers.get("content-length").and_then(|v| v.parse().ok());
    match status {
        200 => {
            body.clear();
            *total = length;
        }
        206 => {
            let range = resp.headers.get("content-range").and_then(parse_content_range);
            match range {
                Some((from, full)) if from == offset => *total = Some(full),
                _ => return TryEnd::Partial("unexpected content-range".into()),
            }
        }
        416 if total.is_some_and(|t| t == offset) => return TryEnd::Complete,
        500..=599 => return TryEnd::Partial(format!("status {status}")),
        _ => return TryEnd::Fatal(format!("status {status}")),
    }
    body.extend_from_slice(&buf);
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        if total.is_some_and(|t| body.len() as u64 >= t) {
            body.truncate(total.unwrap() as usize);
            return TryEnd::Complete;
        }
        match tokio::time::timeout(timeout, s.read(&mut chunk)).await {
            Ok(Ok(0)) => {
                return if total.is_none() { TryEnd::Complete } else { TryEnd::Partial("short body".into()) };
            }
            Ok(Ok(n)) => body.extend_from_slice(&chunk[..n]),
            Ok(Err(e)) => return io(e),
            Err(e) => return within("read")(e),
        }
    }
}

/// `bytes A-B/LEN` to `(A, LEN)`.
fn parse_content_range(v: &str) -> Option<(u64, u64)> {
    let rest = v.trim().strip_prefix("bytes ")?;
    let (span, len) = rest.split_once('/')?;
    let (a, _) = span.split_once('-')?;
    Some((a.parse().ok()?, len.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ports::free_addr;
    use crate::harness::stubs::http_exchange;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("bytes=100-"), Some(ByteRange::From(100)));
        assert_eq!(parse_range("bytes=1-5"), Some(ByteRange::Span(1, 5)));
        assert_eq!(parse_range("bytes=5-1"), None);
        assert_eq!(parse_range("items=1-"), None);
        assert_eq!(parse_content_range("bytes 100-199/200"), Some((100, 200)));
    }

    #[test]
    fn paths_cannot_escape_root() {
        let root = Path::new("/srv");
        assert_eq!(resolve(root, "/a/b.bin"), Some(PathBuf::from("/srv/a/b.bin")));
        assert_eq!(resolve(root, "http://UNSTABLE/f?x=1"), Some(PathBuf::from("/srv/f")));
        assert_eq!(resolve(root, "/../etc/passwd"), None);
        assert_eq!(resolve(root, "/"), None);
    }

    async fn server() -> (tempfile::TempDir, Stub, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_file(5000, 3);
        std::fs::write(dir.path().join("f.bin"), &data).unwrap();
        let stub = file_server(free_addr(), dir.path().to_path_buf()).await.unwrap();
        (dir, stub, data)
    }

    #[tokio::test]
    async fn serves_full_ranges_and_errors() {
        let (_dir, stub, data) = server().await;
        let get = |range: Option<&str>, path: &str| {
            let mut h = MessageHead::request("GET", path).with_header("host", "x");
            if let Some(r) = range {
                h = h.with_header("range", r);
            }
            h
        };
        let (h, body) = http_exchange(stub.addr, &get(None, "/f.bin")).await.unwrap();
        assert_eq!((h.status(), sha256_hex(&body)), (Some(200), sha256_hex(&data)));

        let (h, body) = http_exchange(stub.addr, &get(Some("bytes=100-"), "/f.bin")).await.unwrap();
        assert_eq!(h.status(), Some(206));
        assert_eq!(h.headers.get("content-range"), Some("bytes 100-4999/5000"));
        assert_eq!(body, &data[100..]);

        let (h, _) = http_exchange(stub.addr, &get(Some("bytes=5000-"), "/f.bin")).await.unwrap();
        assert_eq!(h.status(), Some(416));
        let (h, _) = http_exchange(stub.addr, &get(None, "/nope")).await.unwrap();
        assert_eq!(h.status(), Some(404));
    }

    #[tokio::test]
    async fn client_downloads_and_checks_digest() {
        let (_dir, stub, data) = server().await;
        let params = DownloadParams { tries: 3, waitretry: Duration::from_millis(10), timeout: Duration::from_secs(2) };
        let mut req = DownloadRequest {
            connect: stub.addr,
            target: "/f.bin".into(),
            host: "files".into(),
            headers: vec![],
            expected_sha256: Some(sha256_hex(&data)),
        };
        let r = http_file_client(&req, &params).await;
        assert!(r.success, "{r:?}");
        assert_eq!((r.tries, r.bytes), (1, 5000));

        req.expected_sha256 = Some("00".into());
        assert!(!http_file_client(&req, &params).await.success);
        req.target = "/missing".into();
        let r = http_file_client(&req, &params).await;
        assert!(!r.success);
        assert_eq!(r.tries, 1);
    }

    #[tokio::test]
    async fn client_resumes_after_a_cut() {
        // first connection gets half the body and a close; later ones are honest
        let data = synthetic_file(4000, 9);
        let served = data.clone();
        let cut = serve_tcp(free_addr(), move |mut s| {
            let data = served.clone();
            async move {
                let mut buf = BytesMut::new();
                let Ok(Some(head)) = read_head(&mut s, &mut buf).await else { return };
                let from = match head.headers.get("range").and_then(parse_range) {
                    Some(ByteRange::From(a)) => a as usize,
                    _ => 0,
                };
                let status = if from > 0 { 206 } else { 200 };
                let mut resp = MessageHead::response(status).with_header("content-length", (data.len() - from).to_string());
                if from > 0 {
                    resp = resp.with_header("content-range", format!("bytes {from}-{}/{}", data.len() - 1, data.len()));
                }
                let _ = write_head(&mut s, &resp).await;
                let upto = if from == 0 { data.len() / 2 } else { data.len() };
                let _ = s.write_all(&data[from..upto]).await;
                let _ = s.shutdown().await;
            }
        })
        .await
        .unwrap();
        let req = DownloadRequest {
            connect: cut.addr,
            target: "/f".into(),
            host: "files".into(),
            headers: vec![],
            expected_sha256: Some(sha256_hex(&data)),
        };
        let params = DownloadParams { tries: 3, waitretry: Duration::from_millis(10), timeout: Duration::from_secs(2) };
        let r = http_file_client(&req, &params).await;
        assert!(r.success, "{r:?}");
        assert_eq!(r.tries, 2);
        assert_eq!(cut.hits(), 2);
    }
}
