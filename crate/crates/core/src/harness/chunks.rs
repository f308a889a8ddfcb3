//! Chunked object fetch over UDP, a stand-in for a named-data consumer and
//! its producers. Servers tag every answer so tests can see who served it.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::net::UdpSocket;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio_util::sync::CancellationToken;

use super::files::{sha256_hex, synthetic_file};

pub const CHUNK_SIZE: usize = 1000;

/// A published object: its bytes are derived from the name, so producers
/// and consumers agree on the digest without talking.
#[derive(Debug, Clone)]
pub struct Object {
    pub name: String,
    pub data: Arc<Vec<u8>>,
}

impl Object {
    pub fn new(name: &str, chunks: u32) -> Self {
        let seed = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        Self { name: name.to_string(), data: Arc::new(synthetic_file(chunks as usize * CHUNK_SIZE, seed)) }
    }

    pub fn chunks(&self) -> u32 {
        self.data.len().div_ceil(CHUNK_SIZE) as u32
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.data)
    }
}

/// Request: `"<namespace>/<object>/<index>"`.
/// Answer: tag length (u8), tag, index (u32 BE), total (u32 BE), payload.
pub fn encode_answer(tag: &str, index: u32, total: u32, payload: &[u8]) -> Vec<u8> {
    let mut d = Vec::with_capacity(9 + tag.len() + payload.len());
    d.push(tag.len() as u8);
    d.extend_from_slice(tag.as_bytes());
    d.extend_from_slice(&index.to_be_bytes());
    d.extend_from_slice(&total.to_be_bytes());
    d.extend_from_slice(payload);
    d
}

pub fn decode_answer(d: &[u8]) -> Option<(String, u32, u32, &[u8])> {
    let tl = *d.first()? as usize;
    let rest = d.get(1..)?;
    let tag = std::str::from_utf8(rest.get(..tl)?).ok()?.to_string();
    let rest = &rest[tl..];
    if rest.len() < 8 {
        return None;
    }
    let index = u32::from_be_bytes(rest[..4].try_into().unwrap());
    let total = u32::from_be_bytes(rest[4..8].try_into().unwrap());
    Some((tag, index, total, &rest[8..]))
}

pub struct ChunkServer {
    pub addr: SocketAddr,
    pub tag: String,
    served: Arc<AtomicU64>,
    cancel: CancellationToken,
}

impl ChunkServer {
    pub fn served(&self) -> u64 {
        self.served.load(Ordering::SeqCst)
    }
}

impl Drop for ChunkServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

/// Serves `objects` under `namespace`; unknown names and indices are
/// ignored.
pub async fn chunk_server(bind: SocketAddr, tag: &str, namespace: &str, objects: &[Object]) -> io::Result<ChunkServer> {
    let sock = UdpSocket::bind(bind).await?;
    let addr = sock.local_addr()?;
    let served = Arc::new(AtomicU64::new(0));
    let cancel = CancellationToken::new();
    let table: HashMap<String, Object> = objects.iter().map(|o| (format!("{namespace}/{}", o.name), o.clone())).collect();
    let (t, s, c) = (tag.to_string(), served.clone(), cancel.clone());
    tokio::spawn(async move {
        let mut buf = vec![0u8; 2048];
        loop {
            let (n, from) = tokio::select! {
                _ = c.cancelled() => return,
                r = sock.recv_from(&mut buf) => match r {
                    Ok(x) => x,
                    Err(_) => continue,
                },
            };
            let Ok(req) = std::str::from_utf8(&buf[..n]) else { continue };
            let Some((name, idx)) = req.rsplit_once('/') else { continue };
            let (Some(obj), Ok(idx)) = (table.get(name), idx.parse::<u32>()) else { continue };
            if idx >= obj.chunks() {
                continue;
            }
            let start = idx as usize * CHUNK_SIZE;
            let payload = &obj.data[start..(start + CHUNK_SIZE).min(obj.data.len())];
            if sock.send_to(&encode_answer(&t, idx, obj.chunks(), payload), from).await.is_ok() {
                s.fetch_add(1, Ordering::SeqCst);
            }
        }
    });
    Ok(ChunkServer { addr, tag: tag.to_string(), served, cancel })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchParams {
    pub pipeline: usize,
    pub chunk_timeout: Duration,
    pub chunk_retries: u32,
}

impl Default for FetchParams {
    fn default() -> Self {
        Self { pipeline: 20, chunk_timeout: Duration::from_secs(2), chunk_retries: 3 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FetchReport {
    pub chunks: u32,
    pub fetched: u32,
    pub retries: u32,
    pub elapsed: Duration,
    pub hits: BTreeMap<String, u32>,
    pub digest_ok: bool,
}

/// Fetches every chunk of `namespace/object` with up to `pipeline`
/// requests in flight. Each request uses its own socket, so each is a
/// separate flow for the proxies on the way. Sockets stay bound until the
/// whole fetch is done; a reused port would land in a live flow.
pub async fn chunk_fetch(ingress: SocketAddr, namespace: &str, object: &Object, params: &FetchParams) -> FetchReport {
    let start = Instant::now();
    let total = object.chunks();
    let gate = Arc::new(Semaphore::new(params.pipeline.max(1)));
    let mut tasks = JoinSet::new();
    for idx in 0..total {
        let permit = gate.clone().acquire_owned().await.expect("semaphore open");
        let req = format!("{namespace}/{}/{idx}", object.name);
        let p = params.clone();
        tasks.spawn(async move {
            let _permit = permit;
            let mut retries = 0;
            let mut socks = Vec::new();
            loop {
                let got = match UdpSocket::bind("127.0.0.1:0").await {
                    Ok(sock) => {
                        let got = fetch_one(&sock, ingress, &req, idx, p.chunk_timeout).await;
                        socks.push(sock);
                        got
                    }
                    Err(_) => Ok(None),
                };
                if let Ok(Some(got)) = got {
                    return (idx, Some(got), retries, socks);
                }
                if retries == p.chunk_retries {
                    return (idx, None, retries, socks);
                }
                retries += 1;
            }
        });
    }
    let mut data = vec![Vec::new(); total as usize];
    let mut report = FetchReport { chunks: total, ..Default::default() };
    let mut held = Vec::new();
    while let Some(done) = tasks.join_next().await {
        let (idx, got, retries, socks) = done.expect("fetch task");
        held.extend(socks);
        report.retries += retries;
        if let Some((tag, payload)) = got {
            report.fetched += 1;
            *report.hits.entry(tag).or_default() += 1;
            data[idx as usize] = payload;
        }
    }
    report.elapsed = start.elapsed();
    report.digest_ok = report.fetched == total && sha256_hex(&data.concat()) == object.digest();
    report
}

async fn fetch_one(
    sock: &UdpSocket,
    ingress: SocketAddr,
    req: &str,
    idx: u32,
    timeout: Duration,
) -> io::Result<Option<(String, Vec<u8>)>> {
    sock.send_to(req.as_bytes(), ingress).await?;
    let mut buf = vec![0u8; 4096];
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let Ok(r) = tokio::time::timeout_at(deadline, sock.recv(&mut buf)).await else { return Ok(None) };
        if let Some((tag, i, _, payload)) = decode_answer(&buf[..r?]) {
            if i == idx {
                return Ok(Some((tag, payload.to_vec())));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_round_trip() {
        let d = encode_answer("dev-a", 7, 200, b"xyz");
        assert_eq!(decode_answer(&d), Some(("dev-a".to_string(), 7, 200, &b"xyz"[..])));
        assert_eq!(decode_answer(&d[..5]), None);
    }

    #[test]
    fn objects_are_deterministic_per_name() {
        assert_eq!(Object::new("video", 3).digest(), Object::new("video", 3).digest());
        assert_ne!(Object::new("video", 3).digest(), Object::new("audio", 3).digest());
        assert_eq!(Object::new("video", 3).chunks(), 3);
    }

    #[tokio::test]
    async fn direct_fetch_reassembles() {
        let obj = Object::new("o", 50);
        let srv = chunk_server("127.0.0.1:0".parse().unwrap(), "s1", "DEV", std::slice::from_ref(&obj)).await.unwrap();
        let r = chunk_fetch(srv.addr, "DEV", &obj, &FetchParams::default()).await;
        assert!(r.digest_ok, "{r:?}");
        assert_eq!(r.hits.get("s1"), Some(&50));
        assert_eq!(srv.served(), 50);

        let wrong_ns = FetchParams { chunk_timeout: Duration::from_millis(50), chunk_retries: 0, ..Default::default() };
        let r = chunk_fetch(srv.addr, "TEST", &Object::new("o", 2), &wrong_ns).await;
        assert_eq!(r.fetched, 0);
        assert!(!r.digest_ok);
    }
}
