//! Per-rank block store and data listener.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{err_frame, msg, GetReq, HelloR, Release, PROTOCOL_VERSION};
use crate::codec::PayloadHeader;
use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame, write_frame_parts};
use crate::types::BlockRecord;

struct Held {
    rec: BlockRecord,
    elem_size: u32,
    /// `None` when the body lives in the shm segment.
    body: Option<Arc<Vec<u8>>>,
}

struct StepBuf {
    blocks: HashMap<String, Held>,
    shm: Option<PathBuf>,
    bytes: u64,
    /// `None` until rank 0's decision names the readers.
    waiting: Option<HashSet<u32>>,
    early: HashSet<u32>,
}

#[derive(Default)]
struct Store {
    steps: BTreeMap<u64, StepBuf>,
    gone: HashSet<u32>,
    bytes_held: u64,
    max_bytes_held: u64,
}

impl Store {
    fn free(&mut self, step: u64) {
        if let Some(b) = self.steps.remove(&step) {
            self.bytes_held -= b.bytes;
            if let Some(p) = b.shm {
                let _ = std::fs::remove_file(p);
            }
        }
    }

    fn free_if_done(&mut self, step: u64) {
        let done = self
            .steps
            .get(&step)
            .is_some_and(|b| b.waiting.as_ref().is_some_and(|w| w.is_empty()));
        if done {
            self.free(step);
        }
    }
}

#[derive(Default)]
struct Shared {
    store: Mutex<Store>,
    changed: Condvar,
}

pub(crate) struct DataServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Arc<AtomicBool>,
}

impl DataServer {
    pub fn start(bind: &str) -> Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let (s, stop) = (shared.clone(), shutdown.clone());
        thread::Builder::new()
            .name("stage-data".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(c) = conn else { continue };
                    let _ = c.set_nodelay(true);
                    let s = s.clone();
                    thread::spawn(move || {
                        if let Err(e) = serve(c, s) {
                            log::debug!("data connection: {e}");
                        }
                    });
                }
            })
            .expect("spawn data listener");
        Ok(Self {
            addr,
            shared,
            shutdown,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Holds a step's blocks. With `shm` the bodies are written to that
    /// segment at the records' offsets and dropped from memory.
    pub fn register(
        &self,
        step: u64,
        blocks: Vec<(BlockRecord, u32, Vec<u8>)>,
        shm: Option<PathBuf>,
    ) -> Result<()> {
        let bytes: u64 = blocks.iter().map(|b| b.2.len() as u64).sum();
        if let Some(p) = &shm {
            let mut seg = Vec::with_capacity(bytes as usize);
            for (rec, _, body) in &blocks {
                debug_assert_eq!(rec.offset, seg.len() as u64);
                seg.extend_from_slice(body);
            }
            std::fs::write(p, &seg)?;
        }
        let held = blocks
            .into_iter()
            .map(|(rec, elem_size, body)| {
                let body = shm.is_none().then(|| Arc::new(body));
                (rec.var.clone(), Held { rec, elem_size, body })
            })
            .collect();
        let mut st = self.shared.store.lock().unwrap();
        st.bytes_held += bytes;
        st.max_bytes_held = st.max_bytes_held.max(st.bytes_held);
        st.steps.insert(
            step,
            StepBuf {
                blocks: held,
                shm,
                bytes,
                waiting: None,
                early: HashSet::new(),
            },
        );
        Ok(())
    }

    /// Applies rank 0's decision: `None` drops the step, otherwise it is
    /// held until every named reader releases it.
    pub fn decide(&self, step: u64, readers: Option<&[u32]>) {
        let mut st = self.shared.store.lock().unwrap();
        match readers {
            None => st.free(step),
            Some(ids) => {
                let gone = st.gone.clone();
                if let Some(b) = st.steps.get_mut(&step) {
                    let w = ids
                        .iter()
                        .copied()
                        .filter(|r| !b.early.contains(r) && !gone.contains(r))
                        .collect();
                    b.waiting = Some(w);
                }
                st.free_if_done(step);
            }
        }
        self.shared.changed.notify_all();
    }

    pub fn bytes_held(&self) -> u64 {
        self.shared.store.lock().unwrap().bytes_held
    }

    pub fn max_bytes_held(&self) -> u64 {
        self.shared.store.lock().unwrap().max_bytes_held
    }

    pub fn held_steps(&self) -> usize {
        self.shared.store.lock().unwrap().steps.len()
    }

    /// Waits until nothing is held or `timeout` passes; drops the rest then.
    pub fn drain_all(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.store.lock().unwrap();
        while !st.steps.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                let steps: Vec<u64> = st.steps.keys().copied().collect();
                for s in steps {
                    st.free(s);
                }
                return false;
            }
            st = self.shared.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
        true
    }
}

impl Drop for DataServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let mut st = self.shared.store.lock().unwrap();
        let steps: Vec<u64> = st.steps.keys().copied().collect();
        for s in steps {
            st.free(s);
        }
    }
}

fn release(shared: &Shared, step: u64, reader: u32) {
    let mut st = shared.store.lock().unwrap();
    if let Some(b) = st.steps.get_mut(&step) {
        match &mut b.waiting {
            Some(w) => {
                w.remove(&reader);
            }
            None => {
                b.early.insert(reader);
            }
        }
    }
    st.free_if_done(step);
    shared.changed.notify_all();
}

fn reader_gone(shared: &Shared, reader: u32) {
    let mut st = shared.store.lock().unwrap();
    st.gone.insert(reader);
    let steps: Vec<u64> = st.steps.keys().copied().collect();
    for s in steps {
        if let Some(w) = st.steps.get_mut(&s).and_then(|b| b.waiting.as_mut()) {
            w.remove(&reader);
        }
        st.free_if_done(s);
    }
    shared.changed.notify_all();
}

enum Body {
    Mem(Arc<Vec<u8>>),
    Shm(PathBuf, u64, u64),
}

fn lookup(shared: &Shared, req: &GetReq) -> std::result::Result<(PayloadHeader, Body), String> {
    let st = shared.store.lock().unwrap();
    let b = st
        .steps
        .get(&req.step)
        .ok_or_else(|| format!("step {} is not held (released or never announced)", req.step))?;
    let h = b
        .blocks
        .get(&req.var)
        .ok_or_else(|| format!("no block of {:?} at step {}", req.var, req.step))?;
    let header = PayloadHeader {
        raw_nbytes: h.rec.raw_nbytes,
        codec: h.rec.codec,
        level: h.rec.level,
        shuffle: h.rec.shuffle,
        elem_size: h.elem_size,
    };
    let body = match (&h.body, &b.shm) {
        (Some(m), _) => Body::Mem(m.clone()),
        (None, Some(p)) => Body::Shm(p.clone(), h.rec.offset, h.rec.stored_nbytes),
        (None, None) => return Err("block body missing".into()),
    };
    Ok((header, body))
}

fn serve(conn: TcpStream, shared: Arc<Shared>) -> Result<()> {
    let mut r = BufReader::new(conn.try_clone()?);
    let mut w = BufWriter::new(conn);
    let Some((t, p)) = read_frame(&mut r)? else {
        return Ok(());
    };
    if t != msg::HELLO_R {
        write_frame(&mut w, msg::ERR, &err_frame("expected HELLO_R"))?;
        return Ok(());
    }
    let hello: HelloR = serde_json::from_slice(&p)?;
    if hello.version != PROTOCOL_VERSION {
        write_frame(
            &mut w,
            msg::ERR,
            &err_frame(format!("protocol version {} not supported", hello.version)),
        )?;
        return Ok(());
    }
    let reader = hello.reader_id;
    let res = (|| -> Result<()> {
        while let Some((t, p)) = read_frame(&mut r)? {
            match t {
                msg::GET_REQ => {
                    let req: GetReq = serde_json::from_slice(&p)?;
                    match lookup(&shared, &req) {
                        Ok((header, body)) => {
                            let h = serde_json::to_vec(&header)?;
                            let len = (h.len() as u32).to_le_bytes();
                            match body {
                                Body::Mem(b) => write_frame_parts(&mut w, msg::DATA, &[&len, &h, &b])?,
                                Body::Shm(path, off, n) => {
                                    let mut buf = vec![0u8; n as usize];
                                    File::open(path)?.read_exact_at(&mut buf, off)?;
                                    write_frame_parts(&mut w, msg::DATA, &[&len, &h, &buf])?
                                }
                            }
                        }
                        Err(m) => write_frame(&mut w, msg::ERR, &err_frame(m))?,
                    }
                }
                msg::STEP_RELEASE => {
                    let rel: Release = serde_json::from_slice(&p)?;
                    if let Some(id) = reader {
                        release(&shared, rel.step, id);
                    }
                }
                msg::CLOSE => break,
                other => {
                    write_frame(&mut w, msg::ERR, &err_frame(format!("unexpected message {other}")))?;
                    return Err(Error::protocol(format!("unexpected message {other}")));
                }
            }
        }
        Ok(())
    })();
    if let Some(id) = reader {
        reader_gone(&shared, id);
    }
    res
}
