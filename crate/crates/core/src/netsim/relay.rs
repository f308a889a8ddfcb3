use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use bytes::Bytes;
use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;
use tracing::debug;

use super::impair::{DownBehavior, ImpairmentSpec, Impairer, Verdict};
use super::schedule::LinkState;
use crate::model::Transport;

const MAX_DIAL: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct RelaySpec {
    pub listen: SocketAddr,
    pub forward: SocketAddr,
    pub transport: Transport,
    pub impairment: ImpairmentSpec,
}

#[derive(Debug, Default, Serialize)]
pub struct RelayStats {
    pub accepted: AtomicU64,
    pub refused: AtomicU64,
    pub dial_failures: AtomicU64,
    pub resets: AtomicU64,
    pub bytes_forward: AtomicU64,
    pub bytes_reverse: AtomicU64,
    pub datagrams_in: AtomicU64,
    pub datagrams_dropped: AtomicU64,
    pub datagrams_delivered: AtomicU64,
}

impl RelayStats {
    pub fn load(c: &AtomicU64) -> u64 {
        c.load(Ordering::Relaxed)
    }
}

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

/// A running impairment relay. Dropping it stops the relay.
pub struct Relay {
    local_addr: SocketAddr,
    stats: Arc<RelayStats>,
    cancel: CancellationToken,
}

impl Relay {
    pub async fn start(spec: RelaySpec) -> io::Result<Relay> {
        let stats = Arc::new(RelayStats::default());
        let cancel = CancellationToken::new();
        let spec = Arc::new(spec);
        let local_addr = match spec.transport {
            Transport::Tcp => {
                let listener = TcpListener::bind(spec.listen).await?;
                let addr = listener.local_addr()?;
                tokio::spawn(run_tcp(listener, spec.clone(), stats.clone(), cancel.clone()));
                addr
            }
            Transport::Udp => {
                let sock = UdpSocket::bind(spec.listen).await?;
                let addr = sock.local_addr()?;
                tokio::spawn(run_udp(Arc::new(sock), spec.clone(), stats.clone(), cancel.clone()));
                addr
            }
        };
        Ok(Relay { local_addr, stats, cancel })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> &RelayStats {
        &self.stats
    }

    pub fn shutdown(&self) {
        self.cancel.cancel();
    }

    /// Resolves once the relay is stopped.
    pub async fn stopped(&self) {
        self.cancel.cancelled().await
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

fn reset(stream: TcpStream) {
    let _ = stream.set_zero_linger();
    drop(stream);
}

async fn run_tcp(listener: TcpListener, spec: Arc<RelaySpec>, stats: Arc<RelayStats>, cancel: CancellationToken) {
    loop {
        let accepted = tokio::select! {
            _ = cancel.cancelled() => return,
            r = listener.accept() => r,
        };
        let Ok((down, _)) = accepted else { continue };
        if spec.impairment.link_state(SystemTime::now()) == LinkState::Down {
            bump(&stats.refused, 1);
            reset(down);
            continue;
        }
        bump(&stats.accepted, 1);
        tokio::spawn(handle_tcp(down, spec.clone(), stats.clone(), cancel.child_token()));
    }
}

async fn handle_tcp(down: TcpStream, spec: Arc<RelaySpec>, stats: Arc<RelayStats>, cancel: CancellationToken) {
    let imp = &spec.impairment;
    let budget = match &imp.schedule {
        Some(s) => s.time_until_down(SystemTime::now()).min(MAX_DIAL),
        None => MAX_DIAL,
    };
    let up = match tokio::time::timeout(budget.max(Duration::from_millis(1)), TcpStream::connect(spec.forward)).await {
        Ok(Ok(s)) => s,
        _ => {
            bump(&stats.dial_failures, 1);
            reset(down);
            return;
        }
    };
    let _ = down.set_nodelay(true);
    let _ = up.set_nodelay(true);
    let (mut dr, mut dw) = down.into_split();
    let (mut ur, mut uw) = up.into_split();

    let watchdog = async {
        match (&imp.schedule, imp.on_down) {
            (Some(s), DownBehavior::Reset) => tokio::time::sleep(s.time_until_down(SystemTime::now())).await,
            _ => std::future::pending().await,
        }
    };
    let clean = tokio::select! {
        r = async {
            tokio::try_join!(
                pipe(&mut dr, &mut uw, imp, &stats.bytes_forward),
                pipe(&mut ur, &mut dw, imp, &stats.bytes_reverse),
            )
        } => r.is_ok(),
        _ = watchdog => false,
        _ = cancel.cancelled() => false,
    };
    if !clean {
        bump(&stats.resets, 1);
        if let (Ok(d), Ok(u)) = (dr.reunite(dw), ur.reunite(uw)) {
            reset(d);
            reset(u);
        }
    }
}

/// Copies one direction, delaying each chunk by the link latency and holding
/// it while the link is down.
async fn pipe(
    r: &mut OwnedReadHalf,
    w: &mut OwnedWriteHalf,
    imp: &ImpairmentSpec,
    counter: &AtomicU64,
) -> io::Result<()> {
    let (tx, mut rx) = mpsc::channel::<(Instant, Option<Bytes>)>(256);
    let reader = async move {
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            let n = r.read(&mut buf).await?;
            let chunk = (n > 0).then(|| Bytes::copy_from_slice(&buf[..n]));
            if tx.send((Instant::now(), chunk)).await.is_err() || n == 0 {
                return Ok::<_, io::Error>(());
            }
        }
    };
    let writer = async move {
        while let Some((read_at, chunk)) = rx.recv().await {
            tokio::time::sleep_until(read_at + imp.latency).await;
            if let Some(s) = &imp.schedule {
                if imp.on_down == DownBehavior::Stall {
                    loop {
                        let wait = s.time_until_up(SystemTime::now());
                        if wait.is_zero() {
                            break;
                        }
                        tokio::time::sleep(wait).await;
                    }
                }
            }
            match chunk {
                Some(c) => {
                    w.write_all(&c).await?;
                    counter.fetch_add(c.len() as u64, Ordering::Relaxed);
                }
                None => {
                    w.shutdown().await?;
                    return Ok(());
                }
            }
        }
        Ok(())
    };
    tokio::try_join!(reader, writer).map(|_| ())
}

type Delivery = (Instant, Bytes, Target);

#[derive(Clone)]
enum Target {
    Upstream(Arc<UdpSocket>),
    Client(Arc<UdpSocket>, SocketAddr),
}

fn spawn_delivery(stats: Arc<RelayStats>) -> mpsc::UnboundedSender<Delivery> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Delivery>();
    tokio::spawn(async move {
        while let Some((at, data, target)) = rx.recv().await {
            tokio::time::sleep_until(at).await;
            let sent = match target {
                Target::Upstream(s) => s.send(&data).await,
                Target::Client(s, peer) => s.send_to(&data, peer).await,
            };
            if sent.is_ok() {
                bump(&stats.datagrams_delivered, 1);
            }
        }
    });
    tx
}

async fn run_udp(sock: Arc<UdpSocket>, spec: Arc<RelaySpec>, stats: Arc<RelayStats>, cancel: CancellationToken) {
    let mut forward = Impairer::new(spec.impairment.clone());
    let mut reverse_spec = spec.impairment.clone();
    reverse_spec.seed = reverse_spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let reverse = Arc::new(Mutex::new(Impairer::new(reverse_spec)));
    let forward_q = spawn_delivery(stats.clone());
    let reverse_q = spawn_delivery(stats.clone());
    let mut sessions: HashMap<SocketAddr, Arc<UdpSocket>> = HashMap::new();
    let unspecified: SocketAddr = if spec.forward.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().unwrap();
    let mut buf = vec![0u8; 65536];
    loop {
        let (n, peer) = tokio::select! {
            _ = cancel.cancelled() => return,
            r = sock.recv_from(&mut buf) => match r {
                Ok(x) => x,
                Err(e) => {
                    debug!("relay recv: {e}");
                    continue;
                }
            },
        };
        bump(&stats.datagrams_in, 1);
        let upstream = match sessions.get(&peer) {
            Some(s) => s.clone(),
            None => {
                let Ok(up) = UdpSocket::bind(unspecified).await else { continue };
                if up.connect(spec.forward).await.is_err() {
                    continue;
                }
                let up = Arc::new(up);
                sessions.insert(peer, up.clone());
                let (up2, sock2, stats2, q, rev, c) =
                    (up.clone(), sock.clone(), stats.clone(), reverse_q.clone(), reverse.clone(), cancel.clone());
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 65536];
                    loop {
                        let n = tokio::select! {
                            _ = c.cancelled() => return,
                            r = up2.recv(&mut buf) => match r { Ok(n) => n, Err(_) => continue },
                        };
                        bump(&stats2.datagrams_in, 1);
                        let verdict = rev.lock().unwrap().decide(SystemTime::now());
                        match verdict {
                            Verdict::Drop => bump(&stats2.datagrams_dropped, 1),
                            Verdict::Deliver { after } => {
                                let item = (Instant::now() + after, Bytes::copy_from_slice(&buf[..n]), Target::Client(sock2.clone(), peer));
                                let _ = q.send(item);
                            }
                        }
                    }
                });
                up
            }
        };
        match forward.decide(SystemTime::now()) {
            Verdict::Drop => bump(&stats.datagrams_dropped, 1),
            Verdict::Deliver { after } => {
                let item = (Instant::now() + after, Bytes::copy_from_slice(&buf[..n]), Target::Upstream(upstream));
                let _ = forward_q.send(item);
            }
        }
    }
}
