//! TCP backend.
//!
//! Wire format: every frame is `u32 length` followed by `length` bytes of
//! `u8 collective | u64 sequence | u32 rank | payload`, all little-endian.
//! Ranks form a full mesh; rank `i` dials every lower rank and accepts from
//! every higher one, opening each connection with a `u32 rank, u32 size`
//! hello. Outgoing frames are handed to one writer thread per peer so a
//! large send never blocks the matching receive.

use std::fs;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{BackendKind, CommHandle, Frame, Transport, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};

const FRAME_HEADER: usize = 1 + 8 + 4;

pub(crate) fn encode_frame(f: &Frame) -> Vec<u8> {
    let len = (FRAME_HEADER + f.payload.len()) as u32;
    let mut b = Vec::with_capacity(4 + len as usize);
    b.extend_from_slice(&len.to_le_bytes());
    b.push(f.collective);
    b.extend_from_slice(&f.seq.to_le_bytes());
    b.extend_from_slice(&f.rank.to_le_bytes());
    b.extend_from_slice(&f.payload);
    b
}

pub(crate) fn decode_frame_body(body: Vec<u8>) -> Result<Frame> {
    if body.len() < FRAME_HEADER {
        return Err(Error::Transport(format!("short frame of {} bytes", body.len())));
    }
    Ok(Frame {
        collective: body[0],
        seq: u64::from_le_bytes(body[1..9].try_into().unwrap()),
        rank: u32::from_le_bytes(body[9..13].try_into().unwrap()),
        payload: body[13..].to_vec(),
    })
}

/// Where a rank learns its peers' addresses.
#[derive(Debug, Clone)]
pub enum PeerSource {
    /// Fixed `host:port` per rank.
    List(Vec<SocketAddr>),
    /// Directory in which each rank publishes `rank-<i>.addr`.
    Rendezvous(PathBuf),
}

#[derive(Debug, Clone)]
pub struct SocketConfig {
    pub rank: usize,
    pub size: usize,
    pub peers: PeerSource,
    pub timeout: Duration,
}

pub const ENV_RANK: &str = "DOPINF_RANK";
pub const ENV_SIZE: &str = "DOPINF_SIZE";
pub const ENV_PEERS: &str = "DOPINF_PEERS";
pub const ENV_RENDEZVOUS: &str = "DOPINF_RENDEZVOUS";

impl SocketConfig {
    /// Reads `DOPINF_RANK`, `DOPINF_SIZE` and either `DOPINF_PEERS`
    /// (comma-separated `host:port`) or `DOPINF_RENDEZVOUS` (a directory).
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok();
        let num = |k: &str| -> Result<usize> {
            var(k)
                .ok_or_else(|| Error::InvalidArgument(format!("{k} is not set")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{k} is not an integer")))
        };
        let rank = num(ENV_RANK)?;
        let size = num(ENV_SIZE)?;
        let peers = if let Some(list) = var(ENV_PEERS) {
            let addrs = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad peer address `{s}`")))
                })
                .collect::<Result<Vec<SocketAddr>>>()?;
            PeerSource::List(addrs)
        } else if let Some(dir) = var(ENV_RENDEZVOUS) {
            PeerSource::Rendezvous(dir.into())
        } else {
            return Err(Error::InvalidArgument(format!(
                "set {ENV_PEERS} or {ENV_RENDEZVOUS} for the socket backend"
            )));
        };
        Ok(SocketConfig {
            rank,
            size,
            peers,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn connect(self) -> Result<CommHandle> {
        if self.size == 0 || self.rank >= self.size {
            return Err(Error::InvalidArgument(format!(
                "rank {} outside communicator of size {}",
                self.rank, self.size
            )));
        }
        let deadline = Instant::now() + self.timeout;
        let (listener, addrs) = match &self.peers {
            PeerSource::List(addrs) => {
                if addrs.len() != self.size {
                    return Err(Error::InvalidArgument(format!(
                        "{} peer addresses for {} ranks",
                        addrs.len(),
                        self.size
                    )));
                }
                let l = TcpListener::bind(addrs[self.rank])
                    .map_err(|e| Error::Transport(format!("bind {}: {e}", addrs[self.rank])))?;
                (l, addrs.clone())
            }
            PeerSource::Rendezvous(dir) => {
                let l = TcpListener::bind("127.0.0.1:0")
                    .map_err(|e| Error::Transport(format!("bind: {e}")))?;
                let addr = l.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
                publish(dir, self.rank, addr)?;
                let addrs = (0..self.size)
                    .map(|r| await_address(dir, r, deadline))
                    .collect::<Result<Vec<_>>>()?;
                (l, addrs)
            }
        };

        let mut streams: Vec<Option<TcpStream>> = (0..self.size).map(|_| None).collect();
        for (peer, &addr) in addrs.iter().enumerate().take(self.rank) {
            let mut s = dial(addr, deadline)?;
            let mut hello = Vec::with_capacity(8);
            hello.extend_from_slice(&(self.rank as u32).to_le_bytes());
            hello.extend_from_slice(&(self.size as u32).to_le_bytes());
            s.write_all(&hello)
                .map_err(|e| Error::Transport(format!("hello to rank {peer}: {e}")))?;
            streams[peer] = Some(s);
        }
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut pending = self.size - 1 - self.rank;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    s.set_read_timeout(Some(self.timeout))
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    let mut hello = [0u8; 8];
                    s.read_exact(&mut hello)
                        .map_err(|e| Error::Transport(format!("reading hello: {e}")))?;
                    let peer = u32::from_le_bytes(hello[..4].try_into().unwrap()) as usize;
                    let size = u32::from_le_bytes(hello[4..].try_into().unwrap()) as usize;
                    if size != self.size || peer <= self.rank || peer >= self.size || streams[peer].is_some() {
                        return Err(Error::Transport(format!(
                            "unexpected hello from rank {peer} (size {size})"
                        )));
                    }
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::Transport(format!(
                            "rank {} timed out waiting for {pending} peers",
                            self.rank
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(Error::Transport(format!("accept: {e}"))),
            }
        }

        let mut writers = Vec::with_capacity(self.size);
        let mut readers = Vec::with_capacity(self.size);
        for (peer, s) in streams.into_iter().enumerate() {
            match s {
                None => {
                    writers.push(None);
                    readers.push(None);
                }
                Some(s) => {
                    s.set_nodelay(true).ok();
                    s.set_read_timeout(Some(self.timeout))
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    let mut w = s
                        .try_clone()
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    let (tx, rx) = channel::<Vec<u8>>();
                    let join = std::thread::Builder::new()
                        .name(format!("dopinf-tx-{}-{peer}", self.rank))
                        .spawn(move || {
                            for buf in rx {
                                if w.write_all(&buf).is_err() {
                                    break;
                                }
                            }
                            let _ = w.flush();
                        })
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    writers.push(Some((tx, join)));
                    readers.push(Some(s));
                }
            }
        }
        Ok(CommHandle::with_transport(
            self.rank,
            self.size,
            BackendKind::Socket,
            Box::new(SocketTransport {
                rank: self.rank,
                writers,
                readers,
            }),
        ))
    }
}

fn publish(dir: &Path, rank: usize, addr: SocketAddr) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(".rank-{rank}.addr.tmp"));
    let dst = dir.join(format!("rank-{rank}.addr"));
    fs::write(&tmp, addr.to_string()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

fn await_address(dir: &Path, rank: usize, deadline: Instant) -> Result<SocketAddr> {
    let path = dir.join(format!("rank-{rank}.addr"));
    loop {
        if let Ok(s) = fs::read_to_string(&path) {
            return s
                .trim()
                .parse()
                .map_err(|_| Error::Transport(format!("bad address in {}", path.display())));
        }
        if Instant::now() > deadline {
            return Err(Error::Transport(format!(
                "timed out waiting for {}",
                path.display()
            )));
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn dial(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() > deadline {
                    return Err(Error::Transport(format!("connect {addr}: {e}")));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

type Writer = (Sender<Vec<u8>>, JoinHandle<()>);

struct SocketTransport {
    rank: usize,
    writers: Vec<Option<Writer>>,
    readers: Vec<Option<TcpStream>>,
}

impl Transport for SocketTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        let (tx, _) = self.writers[to]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no connection to rank {to}")))?;
        tx.send(encode_frame(&frame))
            .map_err(|_| Error::Transport(format!("writer to rank {to} has stopped")))
    }

    fn recv(&mut self, from: usize) -> Result<Frame> {
        let rank = self.rank;
        let s = self.readers[from]
            .as_mut()
            .ok_or_else(|| Error::Transport(format!("no connection from rank {from}")))?;
        let io_err = |e: std::io::Error| {
            Error::Transport(format!("rank {rank} receiving from rank {from}: {e}"))
        };
        let mut len = [0u8; 4];
        s.read_exact(&mut len).map_err(io_err)?;
        let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
        s.read_exact(&mut body).map_err(io_err)?;
        decode_frame_body(body)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for (tx, join) in self.writers.drain(..).flatten() {
            drop(tx);
            let _ = join.join();
        }
    }
}

fn unique_dir(tag: &str) -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!(
        "dopinf-{tag}-{}-{}-{nanos}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ))
}

/// Runs `f` on `p` threads, each with its own TCP endpoint on localhost.
pub fn run_socket_threads<R, F>(p: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(CommHandle) -> R + Sync,
{
    let dir = unique_dir("rdv");
    let out = std::thread::scope(|s| {
        let joins: Vec<_> = (0..p)
            .map(|rank| {
                let f = &f;
                let dir = dir.clone();
                s.spawn(move || -> Result<R> {
                    let handle = SocketConfig {
                        rank,
                        size: p,
                        peers: PeerSource::Rendezvous(dir),
                        timeout: DEFAULT_TIMEOUT,
                    }
                    .connect()?;
                    Ok(f(handle))
                })
            })
            .collect();
        joins
            .into_iter()
            .map(|j| j.join().expect("rank thread panicked"))
            .collect::<Result<Vec<R>>>()
    });
    let _ = fs::remove_dir_all(&dir);
    out
}
