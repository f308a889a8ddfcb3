//! Sequenced UDP stream standing in for a video sender and player.

use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::net::UdpSocket;
use tokio_util::sync::CancellationToken;

use crate::splitnet::internet_checksum;

const HEADER: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamParams {
    pub count: u32,
    pub payload: usize,
    /// Datagrams sent back to back before pausing for `batch_interval`.
    pub batch: u32,
    pub batch_interval: Duration,
    /// How long the receiver keeps listening after the last datagram.
    pub quiet: Duration,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            count: 10_000,
            payload: 256,
            batch: 25,
            batch_interval: Duration::from_millis(10),
            quiet: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTally {
    pub sent: u64,
    pub received: u64,
    pub lost: u64,
    pub duplicates: u64,
    pub corrupted: u64,
    pub out_of_order: u64,
    /// Runs of consecutive missing sequence numbers.
    pub gaps: u64,
}

impl StreamTally {
    pub fn loss_fraction(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.lost as f64 / self.sent as f64
        }
    }
}

fn payload_byte(seq: u32, i: usize) -> u8 {
    (seq as usize).wrapping_mul(31).wrapping_add(i) as u8
}

/// `seq` (u32 BE), checksum over seq and payload (u16 BE), payload.
pub fn encode_datagram(seq: u32, payload: usize) -> Vec<u8> {
    let mut d = Vec::with_capacity(HEADER + payload);
    d.extend_from_slice(&seq.to_be_bytes());
    d.extend_from_slice(&[0, 0]);
    d.extend((0..payload).map(|i| payload_byte(seq, i)));
    let sum = checksum(&d);
    d[4..6].copy_from_slice(&sum.to_be_bytes());
    d
}

fn checksum(d: &[u8]) -> u16 {
    let mut covered = Vec::with_capacity(d.len() - 2);
    covered.extend_from_slice(&d[..4]);
    covered.extend_from_slice(&d[HEADER..]);
    internet_checksum(&covered)
}

/// The sequence number of an intact datagram.
pub fn check_datagram(d: &[u8]) -> Option<u32> {
    if d.len() < HEADER {
        return None;
    }
    let seq = u32::from_be_bytes(d[..4].try_into().unwrap());
    let sum = u16::from_be_bytes([d[4], d[5]]);
    (checksum(d) == sum).then_some(seq)
}

pub async fn send_stream(sock: &UdpSocket, to: SocketAddr, params: &StreamParams) -> std::io::Result<u64> {
    let mut tick = tokio::time::interval(params.batch_interval);
    let mut sent = 0u64;
    for seq in 0..params.count {
        if seq % params.batch.max(1) == 0 {
            tick.tick().await;
        }
        sock.send_to(&encode_datagram(seq, params.payload), to).await?;
        sent += 1;
    }
    Ok(sent)
}

/// Collects datagrams until `done` fires and nothing has arrived for
/// `quiet`, or every sequence number has been seen.
pub async fn receive_stream(sock: &UdpSocket, count: u32, quiet: Duration, done: CancellationToken) -> StreamTally {
    let mut seen = vec![false; count as usize];
    let mut tally = StreamTally::default();
    let mut last: Option<u32> = None;
    let mut distinct = 0u32;
    let mut buf = vec![0u8; 65536];
    while distinct < count {
        let n = tokio::select! {
            r = sock.recv(&mut buf) => match r {
                Ok(n) => n,
                Err(_) => continue,
            },
            _ = tokio::time::sleep(quiet) => {
                if done.is_cancelled() {
                    break;
                }
                continue;
            }
        };
        tally.received += 1;
        let Some(seq) = check_datagram(&buf[..n]).filter(|s| *s < count) else {
            tally.corrupted += 1;
            continue;
        };
        if std::mem::replace(&mut seen[seq as usize], true) {
            tally.duplicates += 1;
            continue;
        }
        distinct += 1;
        if last.is_some_and(|l| seq < l) {
            tally.out_of_order += 1;
        }
        last = Some(seq);
    }
    tally.lost = seen.iter().filter(|s| !**s).count() as u64;
    tally.gaps = seen.iter().zip(std::iter::once(&true).chain(seen.iter())).filter(|(s, prev)| !**s && **prev).count() as u64;
    tally
}

/// Streams `params.count` datagrams from `sender` to `to` while `receiver`
/// counts what arrives.
pub async fn udp_stream(sender: &UdpSocket, to: SocketAddr, receiver: UdpSocket, params: &StreamParams) -> std::io::Result<StreamTally> {
    let done = CancellationToken::new();
    let (count, quiet, d) = (params.count, params.quiet, done.clone());
    let rx = tokio::spawn(async move { receive_stream(&receiver, count, quiet, d).await });
    let sent = send_stream(sender, to, params).await;
    done.cancel();
    let mut tally = rx.await.expect("receiver task");
    tally.sent = sent?;
    Ok(tally)
}
