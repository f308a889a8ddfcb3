use std::collections::HashMap;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::net::UdpSocket;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tracing::debug;

use super::icmp::icmp_echo_turnaround;
use super::ipv4::{decapsulate, encapsulate, parse_ipv4};
use super::table::SplitTable;

/// Harness side of the packet injection interface.
pub struct InjectionHandle {
    pub outbound: mpsc::Sender<Vec<u8>>,
    pub inbound: mpsc::Receiver<Vec<u8>>,
}

/// Pump side of the packet injection interface, standing in for a tun device.
pub struct PacketSource {
    outbound: mpsc::Receiver<Vec<u8>>,
    inbound: mpsc::Sender<Vec<u8>>,
}

impl PacketSource {
    #[cfg(test)]
    pub(crate) fn split_for_test(self) -> (mpsc::Receiver<Vec<u8>>, mpsc::Sender<Vec<u8>>) {
        (self.outbound, self.inbound)
    }
}

pub fn injection_pair(capacity: usize) -> (InjectionHandle, PacketSource) {
    let (out_tx, out_rx) = mpsc::channel(capacity);
    let (in_tx, in_rx) = mpsc::channel(capacity);
    (InjectionHandle { outbound: out_tx, inbound: in_rx }, PacketSource { outbound: out_rx, inbound: in_tx })
}

#[derive(Debug, Default)]
pub struct PumpStats {
    pub sent: AtomicU64,
    pub bypassed: AtomicU64,
    pub malformed: AtomicU64,
    pub delivered: AtomicU64,
}

impl PumpStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

/// Split-tunnel client: classifies injected packets by destination and
/// sends them, IP-in-UDP, to the matching local proxy port.
pub struct TunnelClient {
    pub stats: Arc<PumpStats>,
    task: JoinHandle<()>,
    readers: Vec<JoinHandle<()>>,
}

impl TunnelClient {
    pub async fn spawn(source: PacketSource, table: SplitTable, proxy_host: IpAddr) -> io::Result<Self> {
        let stats = Arc::new(PumpStats::default());
        let mut sockets: HashMap<u16, Arc<UdpSocket>> = HashMap::new();
        let mut readers = Vec::new();
        let bind: SocketAddr = match proxy_host {
            IpAddr::V4(_) => "0.0.0.0:0".parse().unwrap(),
            IpAddr::V6(_) => "[::]:0".parse().unwrap(),
        };
        for (_, port) in table.routes() {
            if sockets.contains_key(port) {
                continue;
            }
            let sock = UdpSocket::bind(bind).await?;
            sock.connect(SocketAddr::new(proxy_host, *port)).await?;
            let sock = Arc::new(sock);
            sockets.insert(*port, sock.clone());
            let inbound = source.inbound.clone();
            let stats = stats.clone();
            readers.push(tokio::spawn(async move {
                let mut buf = vec![0u8; 65536];
                while let Ok(n) = sock.recv(&mut buf).await {
                    match decapsulate(&buf[..n]) {
                        Ok(packet) => {
                            stats.delivered.fetch_add(1, Ordering::Relaxed);
                            if inbound.send(packet).await.is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            debug!("dropping reply: {e}");
                            stats.malformed.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            }));
        }

        let PacketSource { mut outbound, inbound } = source;
        drop(inbound);
        let pump_stats = stats.clone();
        let task = tokio::spawn(async move {
            while let Some(packet) = outbound.recv().await {
                let head = match parse_ipv4(&packet) {
                    Ok(h) => h,
                    Err(_) => {
                        pump_stats.malformed.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                };
                let Some(port) = table.classify(head.dst) else {
                    pump_stats.bypassed.fetch_add(1, Ordering::Relaxed);
                    continue;
                };
                let payload = encapsulate(&packet).expect("validated above");
                if sockets[&port].send(&payload).await.is_ok() {
                    pump_stats.sent.fetch_add(1, Ordering::Relaxed);
                }
            }
        });
        Ok(Self { stats, task, readers })
    }
}

impl Drop for TunnelClient {
    fn drop(&mut self) {
        self.task.abort();
        for r in &self.readers {
            r.abort();
        }
    }
}

#[derive(Debug, Default)]
pub struct EchoEndpointStats {
    pub answered: AtomicU64,
    pub dropped: AtomicU64,
}

/// Destination-side tunnel endpoint: decapsulates packets arriving on
/// `socket`, answers ICMP echo requests and sends replies back encapsulated.
pub async fn run_echo_endpoint(socket: UdpSocket, stats: Arc<EchoEndpointStats>) {
    let mut buf = vec![0u8; 65536];
    loop {
        let Ok((n, from)) = socket.recv_from(&mut buf).await else {
            return;
        };
        let reply = decapsulate(&buf[..n]).ok().and_then(|p| icmp_echo_turnaround(&p));
        match reply {
            Some(reply) => {
                let payload = encapsulate(&reply).expect("turnaround builds valid packets");
                if socket.send_to(&payload, from).await.is_ok() {
                    stats.answered.fetch_add(1, Ordering::Relaxed);
                }
            }
            None => {
                stats.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitnet::icmp::{echo_request, parse_echo, ICMP_ECHO_REPLY};
    use std::net::Ipv4Addr;
    use std::time::Duration;

    const USER: Ipv4Addr = Ipv4Addr::new(10, 8, 0, 2);

    #[tokio::test]
    async fn pump_routes_by_prefix_and_delivers_replies() {
        let p1 = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let p3 = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let table = SplitTable::new([
            ("10.0.0.1/32".parse().unwrap(), p1.local_addr().unwrap().port()),
            ("128.252.0.0/16".parse().unwrap(), p3.local_addr().unwrap().port()),
        ])
        .unwrap();
        let (mut handle, source) = injection_pair(16);
        let client = TunnelClient::spawn(source, table, IpAddr::V4(Ipv4Addr::LOCALHOST)).await.unwrap();

        let req = echo_request(USER, Ipv4Addr::new(10, 0, 0, 1), 7, 1, b"hi");
        handle.outbound.send(req.clone()).await.unwrap();
        let mut buf = [0u8; 2048];
        let (n, from) = tokio::time::timeout(Duration::from_secs(2), p1.recv_from(&mut buf)).await.unwrap().unwrap();
        assert_eq!(&buf[..n], &req[..]);

        // the endpoint answers on the same port
        let reply = icmp_echo_turnaround(&buf[..n]).unwrap();
        p1.send_to(&reply, from).await.unwrap();
        let got = tokio::time::timeout(Duration::from_secs(2), handle.inbound.recv()).await.unwrap().unwrap();
        assert_eq!(parse_echo(&got).unwrap().icmp_type, ICMP_ECHO_REPLY);

        handle.outbound.send(echo_request(USER, Ipv4Addr::new(8, 8, 8, 8), 7, 2, b"")).await.unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert_eq!(PumpStats::get(&client.stats.bypassed), 1);
        assert_eq!(PumpStats::get(&client.stats.sent), 1);
        assert_eq!(PumpStats::get(&client.stats.delivered), 1);
    }

    #[tokio::test]
    async fn echo_endpoint_answers_requests() {
        let sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let addr = sock.local_addr().unwrap();
        let stats = Arc::new(EchoEndpointStats::default());
        tokio::spawn(run_echo_endpoint(sock, stats.clone()));
        let client = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        client.send_to(&echo_request(USER, Ipv4Addr::new(10, 0, 0, 1), 1, 9, b"x"), addr).await.unwrap();
        client.send_to(b"garbage", addr).await.unwrap();
        let mut buf = [0u8; 2048];
        let n = tokio::time::timeout(Duration::from_secs(2), client.recv(&mut buf)).await.unwrap().unwrap();
        let f = parse_echo(&buf[..n]).unwrap();
        assert_eq!((f.sequence, f.dst), (9, USER));
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert_eq!(stats.dropped.load(Ordering::Relaxed), 1);
    }
}
