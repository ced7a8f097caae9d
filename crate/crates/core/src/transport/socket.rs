//! TCP backend: one endpoint per rank, possibly in separate processes.
//!
//! Rendezvous is a plain-text host file with one `rank host port` line per
//! rank; every rank listens on its own port and connects lazily to peers on
//! first send. Each frame is a 16-byte little-endian header
//! `(src: u32, dst: u32, tag: u32, payload_len: u32)` followed by the payload.
//! A reader thread per inbound connection drains frames into the mailbox, so
//! sends never wait on the receiver's progress.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::topology::RankId;

use super::mailbox::Mailbox;
use super::{Tag, Transport};

pub const HEADER_LEN: usize = 16;
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostEntry {
    pub rank: usize,
    pub host: String,
    pub port: u16,
}

/// Parsed host file; entry `i` describes rank `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostFile {
    entries: Vec<HostEntry>,
}

impl HostFile {
    pub fn new(mut entries: Vec<HostEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.rank);
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i {
                return Err(Error::InvalidConfig(format!(
                    "host file ranks must be 0..{} without gaps or duplicates (found rank {} at position {i})",
                    entries.len(),
                    e.rank
                )));
            }
        }
        if entries.is_empty() {
            return Err(Error::InvalidConfig("host file lists no ranks".into()));
        }
        Ok(Self { entries })
    }

    /// Parses `rank host port` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::InvalidConfig(format!("host file line {}: expected `rank host port`", lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            entries.push(HostEntry {
                rank: fields[0].parse().map_err(|_| bad())?,
                host: fields[1].to_string(),
                port: fields[2].parse().map_err(|_| bad())?,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, rank: usize) -> Option<&HostEntry> {
        self.entries.get(rank)
    }

    fn addr(&self, rank: usize) -> Result<Vec<SocketAddr>> {
        let e = self.entry(rank).ok_or(Error::NotMember(rank))?;
        Ok((e.host.as_str(), e.port).to_socket_addrs()?.collect())
    }
}

impl std::fmt::Display for HostFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {}", e.rank, e.host, e.port)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SocketOptions {
    pub connect_timeout: Duration,
    pub recv_timeout: Option<Duration>,
}

impl Default for SocketOptions {
    fn default() -> Self {
        Self {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            recv_timeout: None,
        }
    }
}

pub fn encode_header(src: u32, dst: u32, tag: u32, len: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&src.to_le_bytes());
    h[4..8].copy_from_slice(&dst.to_le_bytes());
    h[8..12].copy_from_slice(&tag.to_le_bytes());
    h[12..16].copy_from_slice(&len.to_le_bytes());
    h
}

pub fn decode_header(h: &[u8; HEADER_LEN]) -> (u32, u32, u32, u32) {
    let word = |i: usize| u32::from_le_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
    (word(0), word(4), word(8), word(12))
}

pub struct SocketEndpoint {
    rank: usize,
    hosts: HostFile,
    opts: SocketOptions,
    mailbox: Arc<Mailbox>,
    outgoing: Mutex<HashMap<usize, TcpStream>>,
    inbound: Arc<Mutex<Vec<TcpStream>>>,
    stop: Arc<AtomicBool>,
    local_addr: SocketAddr,
}

impl SocketEndpoint {
    /// Listens on the port the host file assigns to `rank` (all interfaces).
    pub fn bind(rank: usize, hosts: HostFile, opts: SocketOptions) -> Result<Self> {
        let port = hosts.entry(rank).ok_or(Error::NotMember(rank))?.port;
        let listener = TcpListener::bind(("0.0.0.0", port))?;
        Self::from_listener(rank, listener, hosts, opts)
    }

    /// Uses an already bound listener (lets tests bind port 0 first).
    pub fn from_listener(rank: usize, listener: TcpListener, hosts: HostFile, opts: SocketOptions) -> Result<Self> {
        if rank >= hosts.len() {
            return Err(Error::NotMember(rank));
        }
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let mailbox = Arc::new(Mailbox::default());
        let inbound = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        {
            let mailbox = Arc::clone(&mailbox);
            let inbound = Arc::clone(&inbound);
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name(format!("accept-{rank}"))
                .spawn(move || accept_loop(rank, listener, mailbox, inbound, stop))?;
        }
        Ok(Self {
            rank,
            hosts,
            opts,
            mailbox,
            outgoing: Mutex::new(HashMap::new()),
            inbound,
            stop,
            local_addr,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    fn connect(&self, dst: usize) -> Result<TcpStream> {
        let addrs = self.hosts.addr(dst)?;
        let deadline = Instant::now() + self.opts.connect_timeout;
        loop {
            for addr in &addrs {
                let remaining = deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(1));
                if let Ok(s) = TcpStream::connect_timeout(addr, remaining) {
                    s.set_nodelay(true)?;
                    return Ok(s);
                }
            }
            if Instant::now() >= deadline {
                return Err(Error::PeerUnreachable(dst));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

fn accept_loop(
    rank: usize,
    listener: TcpListener,
    mailbox: Arc<Mailbox>,
    inbound: Arc<Mutex<Vec<TcpStream>>>,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                if let Ok(clone) = stream.try_clone() {
                    inbound.lock().expect("inbound list poisoned").push(clone);
                }
                let mailbox = Arc::clone(&mailbox);
                let _ = std::thread::Builder::new()
                    .name(format!("reader-{rank}"))
                    .spawn(move || read_frames(rank, stream, &mailbox));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(_) => break,
        }
    }
}

fn read_frames(rank: usize, mut stream: TcpStream, mailbox: &Mailbox) {
    let mut peer = None;
    loop {
        let mut header = [0u8; HEADER_LEN];
        if stream.read_exact(&mut header).is_err() {
            break;
        }
        let (src, dst, tag, len) = decode_header(&header);
        if dst as usize != rank {
            break;
        }
        let mut payload = vec![0u8; len as usize];
        if stream.read_exact(&mut payload).is_err() {
            peer = Some(src as usize);
            break;
        }
        peer = Some(src as usize);
        mailbox.push(src as usize, tag, payload);
    }
    if let Some(src) = peer {
        mailbox.mark_dead(src);
    }
}

impl Transport for SocketEndpoint {
    fn rank(&self) -> RankId {
        RankId(self.rank)
    }

    fn world_size(&self) -> usize {
        self.hosts.len()
    }

    fn send(&self, dst: RankId, tag: Tag, payload: &[u8]) -> Result<()> {
        let dst = dst.0;
        if dst == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        if dst >= self.hosts.len() {
            return Err(Error::NotMember(dst));
        }
        let len = u32::try_from(payload.len()).map_err(|_| {
            Error::Unsupported(format!(
                "payload of {} bytes exceeds the u32 frame length",
                payload.len()
            ))
        })?;
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(&encode_header(self.rank as u32, dst as u32, tag, len));
        frame.extend_from_slice(payload);

        let mut out = self.outgoing.lock().expect("outgoing map poisoned");
        if let std::collections::hash_map::Entry::Vacant(e) = out.entry(dst) {
            let s = self.connect(dst)?;
            e.insert(s);
        }
        let stream = out.get_mut(&dst).expect("inserted above");
        if stream.write_all(&frame).is_err() {
            out.remove(&dst);
            return Err(Error::PeerUnreachable(dst));
        }
        Ok(())
    }

    fn recv(&self, src: RankId, tag: Tag) -> Result<Vec<u8>> {
        if src.0 == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        if src.0 >= self.hosts.len() {
            return Err(Error::NotMember(src.0));
        }
        self.mailbox.pop(src.0, tag, self.opts.recv_timeout)
    }
}

impl Drop for SocketEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Ok(out) = self.outgoing.get_mut() {
            for s in out.values() {
                let _ = s.flush_and_close();
            }
        }
        if let Ok(inb) = self.inbound.lock() {
            for s in inb.iter() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

trait FlushAndClose {
    fn flush_and_close(&self) -> std::io::Result<()>;
}

impl FlushAndClose for TcpStream {
    fn flush_and_close(&self) -> std::io::Result<()> {
        let mut s = self;
        s.flush()?;
        self.shutdown(Shutdown::Write)
    }
}

/// Binds `p` loopback endpoints on ephemeral ports and returns them with
/// the matching host file.
pub fn loopback_endpoints(p: usize, opts: SocketOptions) -> Result<(Vec<SocketEndpoint>, HostFile)> {
    let listeners = (0..p)
        .map(|_| TcpListener::bind(("127.0.0.1", 0)))
        .collect::<std::io::Result<Vec<_>>>()?;
    let entries = listeners
        .iter()
        .enumerate()
        .map(|(rank, l)| {
            Ok(HostEntry {
                rank,
                host: "127.0.0.1".into(),
                port: l.local_addr()?.port(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hosts = HostFile::new(entries)?;
    let eps = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| SocketEndpoint::from_listener(rank, l, hosts.clone(), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((eps, hosts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Communicator;

    #[test]
    fn header_is_little_endian() {
        let h = encode_header(1, 2, 0x0102_0304, 8);
        assert_eq!(&h[..4], &[1, 0, 0, 0]);
        assert_eq!(&h[4..8], &[2, 0, 0, 0]);
        assert_eq!(&h[8..12], &[4, 3, 2, 1]);
        assert_eq!(&h[12..], &[8, 0, 0, 0]);
        assert_eq!(decode_header(&h), (1, 2, 0x0102_0304, 8));
    }

    #[test]
    fn host_file_parsing() {
        let hf = HostFile::parse("# ranks\n1 b 9001\n0 a 9000\n\n").unwrap();
        assert_eq!(hf.len(), 2);
        assert_eq!(hf.entry(0).unwrap().host, "a");
        assert_eq!(HostFile::parse(&hf.to_string()).unwrap(), hf);
        assert!(HostFile::parse("0 a").is_err());
        assert!(HostFile::parse("0 a 1\n2 b 2").is_err());
        assert!(HostFile::parse("").is_err());
    }

    #[test]
    fn socket_send_recv_and_fifo() {
        let (eps, _) = loopback_endpoints(2, SocketOptions::default()).unwrap();
        eps[0].send(RankId(1), 7, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        eps[0].send(RankId(1), 7, b"B").unwrap();
        assert_eq!(eps[1].recv(RankId(0), 7).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(eps[1].recv(RankId(0), 7).unwrap(), b"B".to_vec());
        assert!(matches!(eps[0].send(RankId(0), 0, &[]), Err(Error::SelfSend(0))));
    }

    #[test]
    fn socket_barrier_and_exchange() {
        let (eps, _) = loopback_endpoints(4, SocketOptions::default()).unwrap();
        let out: Vec<Vec<u8>> = std::thread::scope(|s| {
            let hs: Vec<_> = eps
                .iter()
                .map(|ep| {
                    s.spawn(move || {
                        let c = Communicator::world(ep);
                        c.barrier().unwrap();
                        let v = c.sendrecv(c.index() ^ 1, 3, &[c.index() as u8]).unwrap();
                        c.barrier().unwrap();
                        v
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (r, v) in out.iter().enumerate() {
            assert_eq!(v, &vec![(r ^ 1) as u8]);
        }
    }

    #[test]
    fn crashed_peer_is_unreachable() {
        let (mut eps, _) = loopback_endpoints(2, SocketOptions::default()).unwrap();
        let ep0 = eps.remove(0);
        ep0.send(RankId(1), 0, b"last").unwrap();
        drop(ep0);
        let ep1 = &eps[0];
        assert_eq!(ep1.recv(RankId(0), 0).unwrap(), b"last".to_vec());
        assert!(matches!(ep1.recv(RankId(0), 0), Err(Error::PeerUnreachable(0))));
    }

    #[test]
    fn unreachable_peer_on_connect() {
        let hosts = HostFile::parse("0 127.0.0.1 0\n1 127.0.0.1 1\n").unwrap();
        let l = TcpListener::bind(("127.0.0.1", 0)).unwrap();
        let ep = SocketEndpoint::from_listener(
            0,
            l,
            hosts,
            SocketOptions {
                connect_timeout: Duration::from_millis(100),
                recv_timeout: Some(Duration::from_millis(50)),
            },
        )
        .unwrap();
        assert!(matches!(ep.send(RankId(1), 0, b"x"), Err(Error::PeerUnreachable(1))));
        assert!(matches!(ep.recv(RankId(1), 0), Err(Error::Timeout(_))));
    }
}
