//! Stream plumbing shared by proxy sessions: head I/O, byte splicing and
//! datagram pumping.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use crate::wire::{encode_capsule, parse_message_head, CapsuleDecoder, HeadError, MessageHead, MAX_HEAD_LEN};

/// Reads one message head. Bytes past the head stay in `buf`. `Ok(None)`
/// means the peer closed before sending anything.
pub async fn read_head<R: AsyncRead + Unpin>(r: &mut R, buf: &mut BytesMut) -> io::Result<Option<MessageHead>> {
    loop {
        if !buf.is_empty() {
            match parse_message_head(buf) {
                Ok((head, used)) => {
                    let _ = buf.split_to(used);
                    return Ok(Some(head));
                }
                Err(HeadError::Incomplete) if buf.len() <= MAX_HEAD_LEN => {}
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
        }
        if r.read_buf(buf).await? == 0 {
            return if buf.is_empty() { Ok(None) } else { Err(io::ErrorKind::UnexpectedEof.into()) };
        }
    }
}

pub async fn write_head<W: AsyncWrite + Unpin>(w: &mut W, head: &MessageHead) -> io::Result<()> {
    let bytes = head.to_bytes().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes).await
}

/// Writes a bodiless response and flushes it.
pub async fn respond<W: AsyncWrite + Unpin>(w: &mut W, status: u16) -> io::Result<()> {
    let mut head = MessageHead::response(status);
    if status != 200 {
        head = head.with_header("content-length", "0").with_header("connection", "close");
    }
    write_head(w, &head).await?;
    w.flush().await
}

/// Closes with RST instead of FIN.
pub fn reset(stream: TcpStream) {
    let _ = stream.set_zero_linger();
    drop(stream);
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SpliceTotals {
    pub a_to_b: u64,
    pub b_to_a: u64,
}

async fn copy_half<R, W>(r: &mut R, w: &mut W, total: &AtomicU64, last: &AtomicU64, start: Instant) -> io::Result<()>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut buf = vec![0u8; 32 * 1024];
    loop {
        let n = r.read(&mut buf).await?;
        if n == 0 {
            let _ = w.shutdown().await;
            return Ok(());
        }
        w.write_all(&buf[..n]).await?;
        total.fetch_add(n as u64, Ordering::Relaxed);
        last.store(start.elapsed().as_millis() as u64, Ordering::Relaxed);
    }
}

/// Copies bytes both ways until both directions finish, either side fails,
/// nothing moves for `idle`, or `cancel` fires. A finished direction shuts
/// down the opposite write side.
pub async fn splice(
    a: &mut TcpStream,
    b: &mut TcpStream,
    idle: Option<Duration>,
    cancel: &CancellationToken,
) -> (SpliceTotals, io::Result<()>) {
    let start = Instant::now();
    let (ab, ba, last) = (AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0));
    let (mut ar, mut aw) = a.split();
    let (mut br, mut bw) = b.split();
    let watchdog = async {
        let Some(idle) = idle else { return std::future::pending().await };
        loop {
            let quiet = start.elapsed().saturating_sub(Duration::from_millis(last.load(Ordering::Relaxed)));
            if quiet >= idle {
                return;
            }
            tokio::time::sleep(idle - quiet).await;
        }
    };
    let result = tokio::select! {
        r = async {
            tokio::try_join!(
                copy_half(&mut ar, &mut bw, &ab, &last, start),
                copy_half(&mut br, &mut aw, &ba, &last, start),
            )
        } => r.map(|_| ()),
        _ = watchdog => Err(io::ErrorKind::TimedOut.into()),
        _ = cancel.cancelled() => Err(io::ErrorKind::Interrupted.into()),
    };
    (SpliceTotals { a_to_b: ab.into_inner(), b_to_a: ba.into_inner() }, result)
}

/// Receiving side of a datagram path.
pub enum DatagramRx {
    Capsules { r: OwnedReadHalf, dec: CapsuleDecoder },
    Udp(Arc<UdpSocket>),
    Channel(mpsc::Receiver<Bytes>),
}

/// Sending side of a datagram path.
pub enum DatagramTx {
    Capsules(OwnedWriteHalf),
    /// Connected socket.
    Udp(Arc<UdpSocket>),
    UdpTo(Arc<UdpSocket>, SocketAddr),
}

impl DatagramRx {
    pub fn capsules(r: OwnedReadHalf, leftover: &[u8]) -> Self {
        DatagramRx::Capsules { r, dec: CapsuleDecoder::with_initial(leftover) }
    }

    /// Next datagram, or `None` once the path is closed. Cancel safe.
    pub async fn recv(&mut self) -> Option<Bytes> {
        match self {
            DatagramRx::Capsules { r, dec } => loop {
                if let Some(d) = dec.next_datagram() {
                    return Some(d);
                }
                match r.read_buf(dec.buffer_mut()).await {
                    Ok(0) | Err(_) => return None,
                    Ok(_) => {}
                }
            },
            DatagramRx::Udp(sock) => {
                let mut buf = vec![0u8; 65536];
                loop {
                    match sock.recv(&mut buf).await {
                        Ok(n) => return Some(Bytes::copy_from_slice(&buf[..n])),
                        // ICMP unreachable from an earlier send; keep listening
                        Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                        Err(_) => return None,
                    }
                }
            }
            DatagramRx::Channel(rx) => rx.recv().await,
        }
    }
}

impl DatagramTx {
    pub async fn send(&mut self, d: &[u8]) -> io::Result<()> {
        match self {
            DatagramTx::Capsules(w) => {
                let frame = encode_capsule(d).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                w.write_all(&frame).await
            }
            DatagramTx::Udp(sock) => match sock.send(d).await {
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Ok(()),
                r => r.map(|_| ()),
            },
            DatagramTx::UdpTo(sock, peer) => sock.send_to(d, *peer).await.map(|_| ()),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PumpTotals {
    pub a_to_b: u64,
    pub b_to_a: u64,
}

/// Forwards datagrams both ways, one capsule or UDP packet per datagram,
/// until a side closes, the path is idle for `idle`, or `cancel` fires.
pub async fn pump_datagrams(
    (mut a_rx, mut a_tx): (DatagramRx, DatagramTx),
    (mut b_rx, mut b_tx): (DatagramRx, DatagramTx),
    idle: Duration,
    cancel: &CancellationToken,
) -> PumpTotals {
    let mut totals = PumpTotals::default();
    let mut deadline = Instant::now() + idle;
    loop {
        tokio::select! {
            _ = cancel.cancelled() => break,
            _ = tokio::time::sleep_until(deadline) => break,
            d = a_rx.recv() => {
                let Some(d) = d else { break };
                if b_tx.send(&d).await.is_err() {
                    break;
                }
                totals.a_to_b += 1;
                deadline = Instant::now() + idle;
            }
            d = b_rx.recv() => {
                let Some(d) = d else { break };
                if a_tx.send(&d).await.is_err() {
                    break;
                }
                totals.b_to_a += 1;
                deadline = Instant::now() + idle;
            }
        }
    }
    if let DatagramTx::Capsules(w) = &mut a_tx {
        let _ = w.shutdown().await;
    }
    if let DatagramTx::Capsules(w) = &mut b_tx {
        let _ = w.shutdown().await;
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::net::TcpListener;

    async fn pair() -> (TcpStream, TcpStream) {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let c = TcpStream::connect(l.local_addr().unwrap()).await.unwrap();
        let (s, _) = l.accept().await.unwrap();
        (c, s)
    }

    #[tokio::test]
    async fn read_head_keeps_trailing_bytes() {
        let (mut c, mut s) = pair().await;
        c.write_all(b"GET / HTTP/1.1\r\nhost: a\r\n\r\nEXTRA").await.unwrap();
        let mut buf = BytesMut::new();
        let head = read_head(&mut s, &mut buf).await.unwrap().unwrap();
        assert_eq!(head.method(), Some("GET"));
        while buf.len() < 5 {
            s.read_buf(&mut buf).await.unwrap();
        }
        assert_eq!(&buf[..], b"EXTRA");
        drop(c);
        let mut buf = BytesMut::new();
        assert!(read_head(&mut s, &mut buf).await.unwrap().is_none());
    }

    #[tokio::test]
    async fn splice_moves_bytes_and_propagates_close() {
        let (mut c1, mut s1) = pair().await;
        let (mut c2, mut s2) = pair().await;
        let cancel = CancellationToken::new();
        let task = tokio::spawn(async move { splice(&mut s1, &mut c2, None, &cancel).await });
        let data: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let echo = tokio::spawn(async move {
            let (mut r, mut w) = s2.split();
            tokio::io::copy(&mut r, &mut w).await.unwrap();
            w.shutdown().await.unwrap();
        });
        let (mut r, mut w) = c1.split();
        let expected = data.clone();
        let (_, got) = tokio::join!(
            async {
                w.write_all(&data).await.unwrap();
                w.shutdown().await.unwrap();
            },
            async {
                let mut got = Vec::new();
                r.read_to_end(&mut got).await.unwrap();
                got
            }
        );
        assert_eq!(got, expected);
        let (totals, res) = task.await.unwrap();
        res.unwrap();
        assert_eq!(totals.a_to_b, 1 << 20);
        echo.await.unwrap();
    }

    #[tokio::test]
    async fn splice_idle_timeout() {
        let (_c1, mut s1) = pair().await;
        let (mut c2, _s2) = pair().await;
        let cancel = CancellationToken::new();
        let (_, res) = splice(&mut s1, &mut c2, Some(Duration::from_millis(100)), &cancel).await;
        assert_eq!(res.unwrap_err().kind(), io::ErrorKind::TimedOut);
    }

    #[tokio::test]
    async fn capsules_to_udp_and_back() {
        let (c, s) = pair().await;
        let (sr, sw) = s.into_split();
        let (mut cr, mut cw) = c.into_split();
        let target = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let up = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        up.connect(target.local_addr().unwrap()).await.unwrap();
        let up = Arc::new(up);
        let cancel = CancellationToken::new();
        let pump = tokio::spawn(async move {
            pump_datagrams(
                (DatagramRx::capsules(sr, &[]), DatagramTx::Capsules(sw)),
                (DatagramRx::Udp(up.clone()), DatagramTx::Udp(up)),
                Duration::from_millis(300),
                &cancel,
            )
            .await
        });
        for p in [&b"abc"[..], b"", b"xyz"] {
            cw.write_all(&encode_capsule(p).unwrap()).await.unwrap();
        }
        let mut buf = [0u8; 64];
        let mut got = Vec::new();
        for _ in 0..3 {
            let (n, from) = target.recv_from(&mut buf).await.unwrap();
            got.push(buf[..n].to_vec());
            target.send_to(&buf[..n], from).await.unwrap();
        }
        assert_eq!(got, [b"abc".to_vec(), vec![], b"xyz".to_vec()]);
        let mut back = vec![0u8; 2 + 3 + 2 + 2 + 3];
        cr.read_exact(&mut back).await.unwrap();
        assert_eq!(back, [0, 3, b'a', b'b', b'c', 0, 0, 0, 3, b'x', b'y', b'z']);
        let totals = pump.await.unwrap();
        assert_eq!((totals.a_to_b, totals.b_to_a), (3, 3));
    }
}
