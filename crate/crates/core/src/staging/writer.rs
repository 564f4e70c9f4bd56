use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::server::DataServer;
use super::{
    contact_file, err_frame, hostname, msg, resolve_endpoint, shm_root, DataplaneDescriptor, HelloR,
    HelloW, Release, PROTOCOL_VERSION,
};
use crate::checksum::crc32c;
use crate::codec;
use crate::comm::Comm;
use crate::engine::{
    all_or_nothing, check_defs, check_put, timeout_as_incomplete, CloseMode, CloseSummary,
    StepReport, StepWriter,
};
use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame};
use crate::index::{index_merge, index_serialize};
use crate::types::{
    validate_defs, BlockRecord, DataplaneKind, EngineParams, QueueFullPolicy, Selection, StepIndex,
    VariableDef,
};

const TAG_FRAGMENT: u8 = 32;

#[derive(Serialize, Deserialize)]
struct Fragment {
    ranks: BTreeSet<u32>,
    index: StepIndex,
}

#[derive(Serialize, Deserialize)]
struct Decision {
    /// `None` means the step was discarded.
    readers: Option<Vec<u32>>,
}

struct ReaderSlot {
    out: Mutex<BufWriter<TcpStream>>,
}

#[derive(Default)]
struct CtlState {
    readers: BTreeMap<u32, Arc<ReaderSlot>>,
    unreleased: BTreeMap<u64, HashSet<u32>>,
    max_unreleased: usize,
    next_id: u32,
    /// Readers that ever completed the handshake.
    joined: u32,
}

impl CtlState {
    fn drop_reader(&mut self, id: u32) {
        self.readers.remove(&id);
        self.unreleased.retain(|_, w| {
            w.remove(&id);
            !w.is_empty()
        });
    }
}

/// Rank 0's control endpoint.
struct Control {
    state: Mutex<CtlState>,
    changed: Condvar,
    addr: std::net::SocketAddr,
    stop: AtomicBool,
}

struct HelloTemplate {
    variables: Vec<VariableDef>,
    world_size: u32,
    tcp: DataplaneDescriptor,
    shm: Option<DataplaneDescriptor>,
    local_host: String,
}

impl Control {
    fn start(bind: &str, tpl: HelloTemplate) -> Result<Arc<Self>> {
        let listener = TcpListener::bind(bind).map_err(|e| Error::Open(format!("bind {bind}: {e}")))?;
        let ctl = Arc::new(Self {
            state: Mutex::new(CtlState::default()),
            changed: Condvar::new(),
            addr: listener.local_addr()?,
            stop: AtomicBool::new(false),
        });
        let c = ctl.clone();
        let tpl = Arc::new(tpl);
        thread::Builder::new()
            .name("stage-control".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if c.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(s) = conn else { continue };
                    let _ = s.set_nodelay(true);
                    let (c, tpl) = (c.clone(), tpl.clone());
                    thread::spawn(move || {
                        if let Err(e) = c.serve(s, &tpl) {
                            log::debug!("control connection: {e}");
                        }
                    });
                }
            })
            .expect("spawn control listener");
        Ok(ctl)
    }

    fn serve(&self, s: TcpStream, tpl: &HelloTemplate) -> Result<()> {
        let mut r = BufReader::new(s.try_clone()?);
        let mut w = BufWriter::new(s);
        let Some((t, p)) = read_frame(&mut r)? else {
            return Ok(());
        };
        let hello: HelloR = match (t, serde_json::from_slice::<HelloR>(&p)) {
            (msg::HELLO_R, Ok(h)) => h,
            _ => {
                write_frame(&mut w, msg::ERR, &err_frame("expected HELLO_R"))?;
                return Ok(());
            }
        };
        if hello.version != PROTOCOL_VERSION {
            write_frame(
                &mut w,
                msg::ERR,
                &err_frame(format!(
                    "protocol version {} not supported (writer speaks {PROTOCOL_VERSION})",
                    hello.version
                )),
            )?;
            return Ok(());
        }
        let dataplane = match &tpl.shm {
            Some(d) if hello.hostname == tpl.local_host => d.clone(),
            _ => tpl.tcp.clone(),
        };
        let id = {
            let mut st = self.state.lock().unwrap();
            st.next_id += 1;
            st.next_id - 1
        };
        let reply = HelloW {
            version: PROTOCOL_VERSION,
            reader_id: id,
            variables: tpl.variables.clone(),
            world_size: tpl.world_size,
            dataplane,
        };
        write_frame(&mut w, msg::HELLO_W, &serde_json::to_vec(&reply)?)?;
        {
            let mut st = self.state.lock().unwrap();
            st.joined += 1;
            st.readers.insert(
                id,
                Arc::new(ReaderSlot {
                    out: Mutex::new(w),
                }),
            );
        }
        self.changed.notify_all();
        log::debug!("reader {id} joined");

        while let Ok(Some((t, p))) = read_frame(&mut r) {
            match t {
                msg::STEP_RELEASE => {
                    if let Ok(rel) = serde_json::from_slice::<Release>(&p) {
                        let mut st = self.state.lock().unwrap();
                        if let Some(w) = st.unreleased.get_mut(&rel.step) {
                            w.remove(&id);
                            if w.is_empty() {
                                st.unreleased.remove(&rel.step);
                            }
                        }
                        drop(st);
                        self.changed.notify_all();
                    }
                }
                msg::CLOSE => break,
                _ => {}
            }
        }
        self.state.lock().unwrap().drop_reader(id);
        self.changed.notify_all();
        log::debug!("reader {id} left");
        Ok(())
    }

    fn wait_readers(&self, n: u32, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        while st.joined < n {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!("{} of {n} readers connected", st.joined)));
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
        Ok(())
    }

    /// Queue-limit decision for `step`: `None` drops it, otherwise the
    /// readers it is announced to.
    fn decide(&self, step: u64, p: &EngineParams) -> Result<Option<Vec<u32>>> {
        let timeout = Duration::from_millis(p.step_timeout_ms);
        let deadline = Instant::now() + timeout;
        let limit = p.queue_limit as usize;
        let mut st = self.state.lock().unwrap();
        loop {
            let full = limit > 0 && st.unreleased.len() >= limit;
            let orphaned = st.readers.is_empty() && p.min_readers > 0;
            if full && p.queue_full_policy == QueueFullPolicy::Discard {
                return Ok(None);
            }
            if !(full || orphaned && p.queue_full_policy == QueueFullPolicy::Block) {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Stall(if orphaned {
                    format!("no readers for {timeout:?} at step {step}")
                } else {
                    format!("queue of {limit} still full after {timeout:?} at step {step}")
                }));
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
        let ids: Vec<u32> = st.readers.keys().copied().collect();
        if !ids.is_empty() {
            st.unreleased.insert(step, ids.iter().copied().collect());
            st.max_unreleased = st.max_unreleased.max(st.unreleased.len());
        }
        Ok(Some(ids))
    }

    fn send_all(&self, ids: &[u32], t: u8, payload: &[u8]) {
        let slots: Vec<(u32, Arc<ReaderSlot>)> = {
            let st = self.state.lock().unwrap();
            ids.iter()
                .filter_map(|id| st.readers.get(id).map(|s| (*id, s.clone())))
                .collect()
        };
        for (id, s) in slots {
            let ok = write_frame(&mut *s.out.lock().unwrap(), t, payload).is_ok();
            if !ok {
                self.state.lock().unwrap().drop_reader(id);
                self.changed.notify_all();
            }
        }
    }

    fn wait_released(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        while !st.unreleased.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
        true
    }

    fn shutdown(&self) {
        let ids: Vec<u32> = self.state.lock().unwrap().readers.keys().copied().collect();
        self.send_all(&ids, msg::CLOSE, &[]);
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Most unreleased steps ever held (rank 0 only).
    pub max_unreleased: usize,
    pub skipped_steps: Vec<u64>,
    pub bytes_held: u64,
    pub max_bytes_held: u64,
    pub held_steps: usize,
}

pub struct StageWriter<'c> {
    comm: &'c Comm,
    params: EngineParams,
    defs: Vec<VariableDef>,
    server: DataServer,
    control: Option<Arc<Control>>,
    shm: Option<DataplaneDescriptor>,
    shm_dir: Option<PathBuf>,
    contact: Option<PathBuf>,
    step: u64,
    put_time: Duration,
    put_vars: HashSet<String>,
    blocks: Vec<(BlockRecord, u32, Vec<u8>)>,
    seg_offset: u64,
    raw_bytes: u64,
    stored_bytes: u64,
    skipped: Vec<u64>,
}

impl<'c> StageWriter<'c> {
    /// Collective. Rank 0 listens on the configured endpoint (or
    /// `MINIIO_ENDPOINT`, or an ephemeral port) and publishes it in the
    /// contact file `<pfs_dir>/<name>.sst`. Returns once `min_readers`
    /// readers have connected.
    pub fn open(
        comm: &'c Comm,
        params: &EngineParams,
        defs: &[VariableDef],
        name: &str,
    ) -> Result<Self> {
        params.validate()?;
        validate_defs(defs)?;
        check_defs(comm, defs)?;
        let rank = comm.rank();
        let server = all_or_nothing(comm, || DataServer::start("127.0.0.1:0"))?;
        let endpoints: Vec<String> = comm
            .gather(server.addr().to_string().as_bytes())?
            .map(|all| {
                all.into_iter()
                    .map(|a| String::from_utf8_lossy(&a).into_owned())
                    .collect()
            })
            .unwrap_or_default();

        let session = if rank == 0 {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_nanos());
            format!("{}-{nanos}", std::process::id())
        } else {
            String::new()
        };
        let session =
            String::from_utf8_lossy(&comm.broadcast((rank == 0).then_some(session.as_bytes()))?)
                .into_owned();
        let shm_dir = (params.dataplane == DataplaneKind::Shm)
            .then(|| shm_root().join(format!("miniio-{session}")));
        let shm = shm_dir.as_ref().map(|d| DataplaneDescriptor {
            kind: DataplaneKind::Shm,
            endpoints: endpoints.clone(),
            shm_pattern: Some(d.join("r{rank}-s{step}").to_string_lossy().into_owned()),
        });

        let mut control = None;
        let mut contact = None;
        all_or_nothing(comm, || {
            if rank != 0 {
                return Ok(());
            }
            if let Some(d) = &shm_dir {
                std::fs::create_dir_all(d)?;
            }
            let bind = resolve_endpoint(params.control_endpoint.as_deref())
                .unwrap_or_else(|| "127.0.0.1:0".into());
            let ctl = Control::start(
                &bind,
                HelloTemplate {
                    variables: defs.to_vec(),
                    world_size: comm.size(),
                    tcp: DataplaneDescriptor {
                        kind: DataplaneKind::Tcp,
                        endpoints: endpoints.clone(),
                        shm_pattern: None,
                    },
                    shm: shm.clone(),
                    local_host: hostname(),
                },
            )?;
            std::fs::create_dir_all(&params.pfs_dir)?;
            let cf = contact_file(&params.pfs_dir, name);
            let tmp = cf.with_extension("sst.tmp");
            std::fs::write(&tmp, ctl.addr.to_string())?;
            std::fs::rename(&tmp, &cf)?;
            log::info!("staging control endpoint {}", ctl.addr);
            contact = Some(cf);
            control = Some(ctl);
            Ok(())
        })?;
        all_or_nothing(comm, || match &control {
            Some(c) => c.wait_readers(
                params.min_readers,
                Duration::from_millis(params.step_timeout_ms),
            ),
            None => Ok(()),
        })?;
        Ok(Self {
            comm,
            params: params.clone(),
            defs: defs.to_vec(),
            server,
            control,
            shm,
            shm_dir,
            contact,
            step: 0,
            put_time: Duration::ZERO,
            put_vars: HashSet::new(),
            blocks: Vec::new(),
            seg_offset: 0,
            raw_bytes: 0,
            stored_bytes: 0,
            skipped: Vec::new(),
        })
    }

    /// The control endpoint (rank 0 only).
    pub fn endpoint(&self) -> Option<String> {
        self.control.as_ref().map(|c| c.addr.to_string())
    }

    pub fn stats(&self) -> StageStats {
        StageStats {
            max_unreleased: self
                .control
                .as_ref()
                .map_or(0, |c| c.state.lock().unwrap().max_unreleased),
            skipped_steps: self.skipped.clone(),
            bytes_held: self.server.bytes_held(),
            max_bytes_held: self.server.max_bytes_held(),
            held_steps: self.server.held_steps(),
        }
    }

    pub fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        let def = &self.defs[check_put(&self.defs, self.step, var, step, sel, bytes)?];
        if !self.put_vars.insert(var.to_string()) {
            return Err(Error::DuplicateBlock {
                var: var.to_string(),
                rank: self.comm.rank(),
            });
        }
        let es = def.dtype.elem_size();
        let (stat_min, stat_max) = def.dtype.min_max(bytes);
        let payload = codec::encode(bytes, es, self.params.codec)?;
        let rec = BlockRecord {
            var: var.to_string(),
            step,
            writer_rank: self.comm.rank(),
            start: sel.start.clone(),
            count: sel.count.clone(),
            subfile_id: self.comm.rank(),
            offset: self.seg_offset,
            stored_nbytes: payload.body.len() as u64,
            raw_nbytes: bytes.len() as u64,
            codec: payload.header.codec,
            level: payload.header.level,
            shuffle: payload.header.shuffle,
            checksum_raw: crc32c(bytes),
            stat_min,
            stat_max,
        };
        self.seg_offset += rec.stored_nbytes;
        self.raw_bytes += rec.raw_nbytes;
        self.stored_bytes += rec.stored_nbytes;
        self.blocks.push((rec, es as u32, payload.body));
        self.put_time += t0.elapsed();
        Ok(())
    }

    pub fn end_step(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        let step = self.step;
        let rank = self.comm.rank();
        let blocks = std::mem::take(&mut self.blocks);
        let recs: Vec<BlockRecord> = blocks.iter().map(|b| b.0.clone()).collect();
        let seg = self.shm.as_ref().and_then(|d| d.shm_path(rank, step));
        self.server.register(step, blocks, seg)?;
        let frag = Fragment {
            ranks: recs.iter().map(|r| r.writer_rank).collect(),
            index: StepIndex {
                step,
                complete: true,
                blocks: recs,
            },
        };
        self.comm.send(0, TAG_FRAGMENT, &serde_json::to_vec(&frag)?)?;

        let decision = if let Some(ctl) = &self.control {
            let mut frags = Vec::new();
            let mut expected = BTreeSet::new();
            for src in 0..self.comm.size() {
                let p = self
                    .comm
                    .recv(Some(src), TAG_FRAGMENT)
                    .map_err(timeout_as_incomplete(step))?
                    .1;
                let f: Fragment = serde_json::from_slice(&p)?;
                expected.extend(f.ranks);
                frags.push(f.index);
            }
            let merged = index_merge(&frags, &expected)?;
            let readers = ctl.decide(step, &self.params);
            let d = Decision {
                readers: readers.as_ref().ok().cloned().flatten(),
            };
            // tell the other ranks even when stalled, so they fail too
            let payload = match &readers {
                Ok(_) => serde_json::to_vec(&d)?,
                Err(e) => err_frame(e.to_string()),
            };
            self.comm.broadcast(Some(&payload))?;
            let ids = readers?;
            if let Some(ids) = &ids {
                ctl.send_all(ids, msg::STEP_ANNOUNCE, index_serialize(&merged).as_bytes());
            }
            d
        } else {
            let p = self.comm.broadcast(None)?;
            serde_json::from_slice::<Decision>(&p).map_err(|_| match serde_json::from_slice::<super::ErrMsg>(&p) {
                Ok(e) => Error::Stall(e.message),
                Err(e) => e.into(),
            })?
        };
        self.server.decide(step, decision.readers.as_deref());
        let skipped = decision.readers.is_none();
        if skipped {
            self.skipped.push(step);
        }
        let report = StepReport {
            step,
            perceived_write_seconds: (self.put_time + t0.elapsed()).as_secs_f64(),
            bb_wait_seconds: 0.0,
            raw_bytes: self.raw_bytes,
            stored_bytes: self.stored_bytes,
            skipped,
        };
        self.step += 1;
        self.put_time = Duration::ZERO;
        self.put_vars.clear();
        self.seg_offset = 0;
        self.raw_bytes = 0;
        self.stored_bytes = 0;
        Ok(report)
    }

    /// Waits (up to the step timeout) for readers to release everything,
    /// then sends CLOSE.
    pub fn close(self, _mode: CloseMode) -> Result<CloseSummary> {
        let t0 = Instant::now();
        let timeout = Duration::from_millis(self.params.step_timeout_ms);
        if let Some(ctl) = &self.control {
            if !ctl.wait_released(timeout) {
                log::warn!("closing with unreleased steps");
            }
        }
        let released = self.server.drain_all(timeout);
        let stats = self.stats();
        let res = all_or_nothing(self.comm, || {
            if let Some(ctl) = &self.control {
                ctl.shutdown();
            }
            if let Some(c) = &self.contact {
                let _ = std::fs::remove_file(c);
            }
            Ok(())
        });
        if let Some(d) = &self.shm_dir {
            if self.comm.rank() == 0 {
                let _ = std::fs::remove_dir_all(d);
            }
        }
        res?;
        let mut summary = CloseSummary {
            steps: self.step,
            close_seconds: t0.elapsed().as_secs_f64(),
            ..Default::default()
        };
        if let serde_json::Value::Object(m) = serde_json::to_value(&stats)? {
            summary.extra = m;
        }
        summary
            .extra
            .insert("released_cleanly".into(), serde_json::Value::Bool(released));
        Ok(summary)
    }
}

impl StepWriter for StageWriter<'_> {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        StageWriter::put(self, var, step, sel, bytes)
    }

    fn end_step(&mut self) -> Result<StepReport> {
        StageWriter::end_step(self)
    }

    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary> {
        StageWriter::close(*self, mode)
    }
}
