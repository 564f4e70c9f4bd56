//! Rank-to-rank message layer over loopback byte streams.
//!
//! Every rank owns a listener; peers connect lazily and announce themselves
//! with a hello frame. Incoming frames land in a mailbox matched by
//! (source, tag), FIFO per source. Ranks find each other through a
//! [`Rendezvous`] server that also stays connected as the coordinator link.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame, write_frame_parts};
use crate::types::Topology;

/// Message tags. Engine tags start at 16.
pub mod tag {
    pub const HELLO: u8 = 1;
    pub const TABLE: u8 = 2;
    pub const BARRIER: u8 = 3;
    pub const BARRIER_RELEASE: u8 = 4;
    pub const BCAST: u8 = 5;
    pub const GATHER: u8 = 6;
    pub const REPORT: u8 = 7;
    pub const ALLGATHER: u8 = 8;
    pub const ALLTOALL: u8 = 9;
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Serialize, Deserialize)]
struct Hello {
    rank: u32,
    addr: String,
}

#[derive(Serialize, Deserialize)]
struct Table {
    addrs: Vec<String>,
}

/// Address exchange server run by the coordinator.
pub struct Rendezvous {
    listener: TcpListener,
}

impl Rendezvous {
    pub fn bind() -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind("127.0.0.1:0")?,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Accepts `world_size` ranks, sends each the address table and returns
    /// the coordinator links indexed by rank.
    pub fn exchange(self, world_size: u32, timeout: Duration) -> Result<Vec<TcpStream>> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut links: Vec<Option<TcpStream>> = (0..world_size).map(|_| None).collect();
        let mut addrs = vec![String::new(); world_size as usize];
        let mut joined = 0;
        while joined < world_size {
            match self.listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(timeout))?;
                    let (t, payload) = read_frame(&mut s)?
                        .ok_or_else(|| Error::protocol("rank closed before hello"))?;
                    if t != tag::HELLO {
                        return Err(Error::protocol(format!("expected hello, got tag {t}")));
                    }
                    let h: Hello = serde_json::from_slice(&payload)?;
                    let slot = links
                        .get_mut(h.rank as usize)
                        .ok_or_else(|| Error::protocol(format!("rank {} out of range", h.rank)))?;
                    if slot.is_some() {
                        return Err(Error::protocol(format!("rank {} joined twice", h.rank)));
                    }
                    s.set_read_timeout(None)?;
                    addrs[h.rank as usize] = h.addr;
                    *slot = Some(s);
                    joined += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::Timeout(format!(
                            "rendezvous: {joined} of {world_size} ranks joined"
                        )));
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let table = serde_json::to_vec(&Table { addrs })?;
        let mut links: Vec<TcpStream> = links.into_iter().map(Option::unwrap).collect();
        for l in &mut links {
            write_frame(l, tag::TABLE, &table)?;
        }
        Ok(links)
    }
}

struct Message {
    src: u32,
    tag: u8,
    payload: Vec<u8>,
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Message>>,
    ready: Condvar,
}

impl Mailbox {
    fn push(&self, m: Message) {
        self.queue.lock().unwrap().push_back(m);
        self.ready.notify_all();
    }

    fn take(&self, src: Option<u32>, tag: u8, timeout: Duration) -> Option<Message> {
        let deadline = Instant::now() + timeout;
        let mut q = self.queue.lock().unwrap();
        loop {
            if let Some(i) = q
                .iter()
                .position(|m| m.tag == tag && src.map_or(true, |s| s == m.src))
            {
                return q.remove(i);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            q = self.ready.wait_timeout(q, deadline - now).unwrap().0;
        }
    }
}

/// One rank's endpoint in the message layer.
pub struct Comm {
    rank: u32,
    topo: Topology,
    addrs: Vec<SocketAddr>,
    out: Vec<Mutex<Option<BufWriter<TcpStream>>>>,
    mailbox: Arc<Mailbox>,
    latency: Option<Duration>,
    coord: Mutex<TcpStream>,
    listen_addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    timeout: Duration,
}

impl Comm {
    /// Joins the world through the rendezvous server at `rendezvous`.
    pub fn join(
        rendezvous: SocketAddr,
        rank: u32,
        topo: Topology,
        latency: Option<Duration>,
    ) -> Result<Self> {
        if rank >= topo.world_size {
            return Err(Error::config(format!(
                "rank {rank} outside world of {}",
                topo.world_size
            )));
        }
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let listen_addr = listener.local_addr()?;
        let mailbox = Arc::new(Mailbox::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        spawn_acceptor(listener, mailbox.clone(), shutdown.clone());

        let mut coord = connect_retry(rendezvous, DEFAULT_TIMEOUT)?;
        let hello = serde_json::to_vec(&Hello {
            rank,
            addr: listen_addr.to_string(),
        })?;
        write_frame(&mut coord, tag::HELLO, &hello)?;
        let (t, payload) =
            read_frame(&mut coord)?.ok_or_else(|| Error::protocol("coordinator closed"))?;
        if t != tag::TABLE {
            return Err(Error::protocol(format!("expected table, got tag {t}")));
        }
        let table: Table = serde_json::from_slice(&payload)?;
        if table.addrs.len() != topo.world_size as usize {
            return Err(Error::protocol("address table size mismatch"));
        }
        let addrs = table
            .addrs
            .iter()
            .map(|a| a.parse().map_err(|_| Error::protocol(format!("bad address {a}"))))
            .collect::<Result<Vec<SocketAddr>>>()?;
        Ok(Self {
            rank,
            topo,
            out: (0..topo.world_size).map(|_| Mutex::new(None)).collect(),
            addrs,
            mailbox,
            latency: latency.filter(|d| !d.is_zero()),
            coord: Mutex::new(coord),
            listen_addr,
            shutdown,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.topo.world_size
    }

    pub fn topology(&self) -> Topology {
        self.topo
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.timeout = t;
    }

    pub fn send(&self, dst: u32, tag: u8, payload: &[u8]) -> Result<()> {
        self.send_parts(dst, tag, &[payload])
    }

    /// Sends one frame assembled from `parts`. Messages to other ranks pay
    /// the injected latency once.
    pub fn send_parts(&self, dst: u32, tag: u8, parts: &[&[u8]]) -> Result<()> {
        if dst == self.rank {
            self.mailbox.push(Message {
                src: self.rank,
                tag,
                payload: parts.concat(),
            });
            return Ok(());
        }
        let slot = self
            .out
            .get(dst as usize)
            .ok_or_else(|| Error::protocol(format!("no rank {dst}")))?;
        let mut guard = slot.lock().unwrap();
        if guard.is_none() {
            let mut s = connect_retry(self.addrs[dst as usize], self.timeout)?;
            write_frame(&mut s, tag::HELLO, &self.rank.to_le_bytes())?;
            *guard = Some(BufWriter::with_capacity(1 << 16, s));
        }
        if let Some(d) = self.latency {
            thread::sleep(d);
        }
        write_frame_parts(guard.as_mut().unwrap(), tag, parts)?;
        Ok(())
    }

    pub fn recv(&self, src: Option<u32>, tag: u8) -> Result<(u32, Vec<u8>)> {
        self.recv_timeout(src, tag, self.timeout)
    }

    pub fn recv_timeout(&self, src: Option<u32>, tag: u8, timeout: Duration) -> Result<(u32, Vec<u8>)> {
        self.mailbox
            .take(src, tag, timeout)
            .map(|m| (m.src, m.payload))
            .ok_or_else(|| {
                Error::Timeout(format!(
                    "rank {} waiting for tag {tag} from {}",
                    self.rank,
                    src.map_or("any".to_string(), |s| s.to_string())
                ))
            })
    }

    pub fn barrier(&self) -> Result<()> {
        if self.rank == 0 {
            for _ in 1..self.size() {
                self.recv(None, tag::BARRIER)?;
            }
            for r in 1..self.size() {
                self.send(r, tag::BARRIER_RELEASE, &[])?;
            }
        } else {
            self.send(0, tag::BARRIER, &[])?;
            self.recv(Some(0), tag::BARRIER_RELEASE)?;
        }
        Ok(())
    }

    /// Rank 0 sends `payload` to everyone; every rank returns it.
    pub fn broadcast(&self, payload: Option<&[u8]>) -> Result<Vec<u8>> {
        if self.rank == 0 {
            let p = payload.ok_or_else(|| Error::protocol("broadcast root needs a payload"))?;
            for r in 1..self.size() {
                self.send(r, tag::BCAST, p)?;
            }
            Ok(p.to_vec())
        } else {
            Ok(self.recv(Some(0), tag::BCAST)?.1)
        }
    }

    /// Gathers one payload per rank at rank 0 (indexed by rank).
    pub fn gather(&self, payload: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        self.send(0, tag::GATHER, payload)?;
        if self.rank != 0 {
            return Ok(None);
        }
        let mut out = vec![Vec::new(); self.size() as usize];
        // per-source receive keeps consecutive gathers from interleaving
        for src in 0..self.size() {
            out[src as usize] = self.recv(Some(src), tag::GATHER)?.1;
        }
        Ok(Some(out))
    }

    /// Every rank sends `payload` straight to every other rank; returns all
    /// payloads indexed by rank.
    pub fn allgather(&self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let parts = vec![payload.to_vec(); self.size() as usize];
        self.exchange_all(tag::ALLGATHER, parts)
    }

    /// `parts[r]` goes to rank `r`; returns what each rank sent here.
    pub fn alltoall(&self, parts: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>> {
        if parts.len() != self.size() as usize {
            return Err(Error::protocol("alltoall needs one part per rank"));
        }
        self.exchange_all(tag::ALLTOALL, parts)
    }

    fn exchange_all(&self, tag: u8, mut parts: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>> {
        let me = self.rank as usize;
        for (r, p) in parts.iter().enumerate() {
            if r != me {
                self.send(r as u32, tag, p)?;
            }
        }
        let mut out = vec![Vec::new(); parts.len()];
        out[me] = std::mem::take(&mut parts[me]);
        for src in 0..self.size() {
            if src != self.rank {
                out[src as usize] = self.recv(Some(src), tag)?.1;
            }
        }
        Ok(out)
    }

    /// Collective: every rank passes its local failure, if any, and every rank
    /// gets back the first failure reported anywhere.
    pub fn agree(&self, failure: Option<String>) -> Result<Option<String>> {
        let mine = failure.map(|m| format!("rank {}: {m}", self.rank)).unwrap_or_default();
        let verdict = self
            .gather(mine.as_bytes())?
            .map(|all| all.into_iter().find(|m| !m.is_empty()).unwrap_or_default());
        let v = self.broadcast(verdict.as_deref())?;
        Ok((!v.is_empty()).then(|| String::from_utf8_lossy(&v).into_owned()))
    }

    /// Sends a frame to the coordinator over the rendezvous link.
    pub fn send_to_coordinator(&self, tag: u8, payload: &[u8]) -> Result<()> {
        let mut c = self.coord.lock().unwrap();
        write_frame(&mut *c, tag, payload)?;
        Ok(())
    }
}

impl Drop for Comm {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for slot in &self.out {
            if let Some(mut w) = slot.lock().unwrap().take() {
                let _ = w.flush();
                let _ = w.get_ref().shutdown(std::net::Shutdown::Write);
            }
        }
        // wake the acceptor
        let _ = TcpStream::connect(self.listen_addr);
    }
}

fn spawn_acceptor(listener: TcpListener, mailbox: Arc<Mailbox>, shutdown: Arc<AtomicBool>) {
    thread::Builder::new()
        .name("comm-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(s) = conn else { continue };
                let _ = s.set_nodelay(true);
                let mailbox = mailbox.clone();
                thread::Builder::new()
                    .name("comm-recv".into())
                    .spawn(move || pump(s, mailbox))
                    .expect("spawn receiver");
            }
        })
        .expect("spawn acceptor");
}

fn pump(s: TcpStream, mailbox: Arc<Mailbox>) {
    let mut r = BufReader::with_capacity(1 << 16, s);
    let src = match read_frame(&mut r) {
        Ok(Some((tag::HELLO, p))) if p.len() == 4 => u32::from_le_bytes(p[..4].try_into().unwrap()),
        _ => return,
    };
    while let Ok(Some((tag, payload))) = read_frame(&mut r) {
        mailbox.push(Message { src, tag, payload });
    }
}

pub(crate) fn connect_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() < deadline => {
                log::trace!("connect {addr}: {e}; retrying");
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Builds a whole world of ranks inside this process, one `Comm` per rank.
pub fn local_world(topo: Topology, latency: Option<Duration>) -> Result<(Vec<Comm>, Vec<TcpStream>)> {
    let rv = Rendezvous::bind()?;
    let addr = rv.addr();
    let joiners: Vec<_> = (0..topo.world_size)
        .map(|r| thread::spawn(move || Comm::join(addr, r, topo, latency)))
        .collect();
    let links = rv.exchange(topo.world_size, DEFAULT_TIMEOUT)?;
    let comms = joiners
        .into_iter()
        .map(|h| h.join().expect("join thread"))
        .collect::<Result<Vec<_>>>()?;
    Ok((comms, links))
}

/// Runs `f` once per rank on its own thread and collects the results by rank.
pub fn run_ranks<T, F>(topo: Topology, latency: Option<Duration>, f: F) -> Result<Vec<T>>
where
    T: Send + 'static,
    F: Fn(Comm) -> Result<T> + Send + Sync + 'static,
{
    let (comms, _links) = local_world(topo, latency)?;
    let f = Arc::new(f);
    let handles: Vec<_> = comms
        .into_iter()
        .map(|c| {
            let f = f.clone();
            thread::spawn(move || f(c))
        })
        .collect();
    let mut out = Vec::new();
    let mut first_err = None;
    for h in handles {
        match h.join().expect("rank thread panicked") {
            Ok(v) => out.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_to_point_and_collectives() {
        let topo = Topology::new(4, 2).unwrap();
        let sums = run_ranks(topo, None, |c| {
            let next = (c.rank() + 1) % c.size();
            c.send(next, 20, &c.rank().to_le_bytes())?;
            let (src, p) = c.recv(None, 20)?;
            assert_eq!(src, (c.rank() + c.size() - 1) % c.size());
            let got = u32::from_le_bytes(p[..4].try_into().unwrap());
            c.barrier()?;
            let b = c.broadcast((c.rank() == 0).then_some(b"go".as_slice()))?;
            assert_eq!(b, b"go");
            let g = c.gather(&[c.rank() as u8])?;
            if let Some(g) = g {
                assert_eq!(g, vec![vec![0], vec![1], vec![2], vec![3]]);
            }
            c.barrier()?;
            Ok(got)
        })
        .unwrap();
        assert_eq!(sums, vec![3, 0, 1, 2]);
    }

    #[test]
    fn allgather_and_alltoall() {
        let topo = Topology::new(3, 3).unwrap();
        run_ranks(topo, None, |c| {
            let me = c.rank() as u8;
            assert_eq!(c.allgather(&[me])?, vec![vec![0], vec![1], vec![2]]);
            let parts = (0..3u8).map(|r| vec![me, r]).collect();
            let got = c.alltoall(parts)?;
            for (src, p) in got.iter().enumerate() {
                assert_eq!(p, &vec![src as u8, me]);
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn fifo_per_source_and_self_send() {
        let topo = Topology::new(2, 2).unwrap();
        run_ranks(topo, None, |c| {
            if c.rank() == 1 {
                for i in 0..50u8 {
                    c.send(0, 21, &[i])?;
                }
            } else {
                c.send(0, 22, b"me")?;
                for i in 0..50u8 {
                    assert_eq!(c.recv(Some(1), 21)?.1, vec![i]);
                }
                assert_eq!(c.recv(Some(0), 22)?.1, b"me");
            }
            c.barrier()
        })
        .unwrap();
    }

    #[test]
    fn latency_is_paid_per_remote_message() {
        let topo = Topology::new(2, 1).unwrap();
        let lat = Duration::from_millis(5);
        let times = run_ranks(topo, Some(lat), move |c| {
            let t = Instant::now();
            if c.rank() == 0 {
                for _ in 0..4 {
                    c.send(1, 23, b"x")?;
                }
            } else {
                for _ in 0..4 {
                    c.recv(Some(0), 23)?;
                }
            }
            Ok(t.elapsed())
        })
        .unwrap();
        assert!(times[0] >= lat * 4, "{:?}", times[0]);
    }

    #[test]
    fn recv_times_out() {
        let topo = Topology::new(1, 1).unwrap();
        run_ranks(topo, None, |c| {
            let e = c.recv_timeout(None, 30, Duration::from_millis(20)).unwrap_err();
            assert!(matches!(e, Error::Timeout(_)));
            Ok(())
        })
        .unwrap();
    }
}
