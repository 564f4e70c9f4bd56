//! Background drain of burst-buffer files to the PFS.
//!
//! Segments are copied at identical offsets, so the PFS copy ends up
//! byte-identical to a direct write. Progress is published per step in a
//! small file next to the burst-buffer data so other processes can wait for it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::throttle::{PfsFile, PfsThrottle, MAX_REQUEST};

const PROGRESS_WAIT: Duration = Duration::from_secs(600);

#[derive(Debug)]
enum Task {
    Copy {
        src: PathBuf,
        dst: PathBuf,
        offset: u64,
        len: u64,
    },
    StepDone(u64),
    /// Appends `bytes` to `dst` once every progress file reports `step`.
    AppendAfter {
        dst: PathBuf,
        bytes: Vec<u8>,
        step: u64,
        wait_for: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrainStats {
    pub bytes_pending: u64,
    pub bytes_drained: u64,
    /// -1 until the first step is drained.
    pub drained_through_step: i64,
    pub max_bytes_pending: u64,
}

#[derive(Default)]
struct Shared {
    pending: Mutex<u64>,
    freed: Condvar,
    max_pending: AtomicU64,
    drained: AtomicU64,
    drained_through: AtomicI64,
    errors: Mutex<Vec<String>>,
}

pub struct DrainWorker {
    tx: Option<Sender<Task>>,
    shared: Arc<Shared>,
    capacity: Option<u64>,
    handle: Option<JoinHandle<()>>,
}

impl DrainWorker {
    /// `progress` is where this worker publishes its drained-through step.
    pub fn spawn(
        throttle: Option<Arc<PfsThrottle>>,
        capacity: Option<u64>,
        progress: Option<PathBuf>,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            drained_through: AtomicI64::new(-1),
            ..Default::default()
        });
        let s = shared.clone();
        let handle = thread::Builder::new()
            .name("bb-drain".into())
            .spawn(move || run(rx, s, throttle, progress))
            .expect("spawn drain worker");
        Self {
            tx: Some(tx),
            shared,
            capacity,
            handle: Some(handle),
        }
    }

    /// Claims burst-buffer space for `n` bytes, waiting for the drain when
    /// the buffer is full. Returns the time spent waiting.
    pub fn reserve(&self, n: u64) -> Duration {
        let start = Instant::now();
        let mut pending = self.shared.pending.lock().unwrap();
        if let Some(cap) = self.capacity {
            while *pending > 0 && *pending + n > cap {
                pending = self.shared.freed.wait(pending).unwrap();
            }
        }
        *pending += n;
        self.shared.max_pending.fetch_max(*pending, Ordering::Relaxed);
        start.elapsed()
    }

    /// Queues a segment copy. The bytes must have been reserved.
    pub fn copy(&self, src: &Path, dst: &Path, offset: u64, len: u64) {
        self.send(Task::Copy {
            src: src.to_path_buf(),
            dst: dst.to_path_buf(),
            offset,
            len,
        });
    }

    pub fn step_done(&self, step: u64) {
        self.send(Task::StepDone(step));
    }

    pub fn append_after(&self, dst: &Path, bytes: Vec<u8>, step: u64, wait_for: Vec<PathBuf>) {
        self.send(Task::AppendAfter {
            dst: dst.to_path_buf(),
            bytes,
            step,
            wait_for,
        });
    }

    fn send(&self, t: Task) {
        if let Some(tx) = &self.tx {
            if tx.send(t).is_err() {
                self.shared
                    .errors
                    .lock()
                    .unwrap()
                    .push("drain worker exited early".into());
            }
        }
    }

    pub fn stats(&self) -> DrainStats {
        DrainStats {
            bytes_pending: *self.shared.pending.lock().unwrap(),
            bytes_drained: self.shared.drained.load(Ordering::Relaxed),
            drained_through_step: self.shared.drained_through.load(Ordering::Relaxed),
            max_bytes_pending: self.shared.max_pending.load(Ordering::Relaxed),
        }
    }

    /// Waits for every queued task, then surfaces the first recorded failure.
    pub fn finish(mut self) -> Result<DrainStats> {
        self.shutdown();
        let errors = self.shared.errors.lock().unwrap();
        if let Some(e) = errors.first() {
            return Err(Error::Drain(e.clone()));
        }
        drop(errors);
        Ok(self.stats())
    }

    fn shutdown(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DrainWorker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn read_progress(path: &Path) -> Option<i64> {
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

fn write_progress(path: &Path, step: u64) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, step.to_string())?;
    std::fs::rename(tmp, path)
}

fn run(
    rx: Receiver<Task>,
    shared: Arc<Shared>,
    throttle: Option<Arc<PfsThrottle>>,
    progress: Option<PathBuf>,
) {
    let mut sources: HashMap<PathBuf, File> = HashMap::new();
    let mut sinks: HashMap<PathBuf, PfsFile> = HashMap::new();
    let mut buf = Vec::new();
    for task in rx {
        let res: Result<()> = (|| {
            match task {
                Task::Copy {
                    src,
                    dst,
                    offset,
                    len,
                } => {
                    if !sources.contains_key(&src) {
                        sources.insert(src.clone(), File::open(&src)?);
                    }
                    if !sinks.contains_key(&dst) {
                        let f = PfsFile::open_shared(&dst, throttle.clone())?;
                        sinks.insert(dst.clone(), f);
                    }
                    let (s, d) = (&sources[&src], &sinks[&dst]);
                    let mut done = 0u64;
                    while done < len {
                        let n = (len - done).min(MAX_REQUEST as u64) as usize;
                        buf.resize(n, 0);
                        s.read_exact_at(&mut buf, offset + done)?;
                        d.write_at(offset + done, &buf)?;
                        done += n as u64;
                        shared.drained.fetch_add(n as u64, Ordering::Relaxed);
                        let mut p = shared.pending.lock().unwrap();
                        *p = p.saturating_sub(n as u64);
                        shared.freed.notify_all();
                    }
                }
                Task::StepDone(step) => {
                    shared
                        .drained_through
                        .fetch_max(step as i64, Ordering::Relaxed);
                    if let Some(p) = &progress {
                        write_progress(p, step)?;
                    }
                }
                Task::AppendAfter {
                    dst,
                    bytes,
                    step,
                    wait_for,
                } => {
                    let deadline = Instant::now() + PROGRESS_WAIT;
                    for p in &wait_for {
                        while read_progress(p).map_or(true, |s| s < step as i64) {
                            if Instant::now() > deadline {
                                return Err(Error::Drain(format!(
                                    "{} never reached step {step}",
                                    p.display()
                                )));
                            }
                            thread::sleep(Duration::from_millis(1));
                        }
                    }
                    let f = OpenOptions::new().create(true).append(true).open(&dst)?;
                    if let Some(t) = &throttle {
                        t.acquire(bytes.len() as u64)?;
                    }
                    use std::io::Write;
                    (&f).write_all(&bytes)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            log::error!("drain: {e}");
            shared.errors.lock().unwrap().push(e.to_string());
            // release anything still reserved so writers do not hang
            let mut p = shared.pending.lock().unwrap();
            *p = 0;
            shared.freed.notify_all();
        }
    }
    for (_, f) in sinks {
        let _ = f.sync();
    }
}
