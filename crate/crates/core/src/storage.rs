//! Where a rank's output bytes land: straight onto the (throttled) PFS, or
//! onto its node's burst buffer with a background drain to the PFS.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::drain::{DrainStats, DrainWorker};
use crate::error::Result;
use crate::throttle::{PfsFile, PfsThrottle};
use crate::types::{EngineParams, Topology};

pub struct Storage {
    pfs_root: PathBuf,
    bb_root: Option<PathBuf>,
    throttle: Option<Arc<PfsThrottle>>,
    bb_capacity: Option<u64>,
    drain: Option<DrainWorker>,
}

impl Storage {
    pub fn new(params: &EngineParams, topo: &Topology, rank: u32) -> Result<Self> {
        let bb_root = params
            .bb_dir
            .as_ref()
            .map(|d| node_bb_root(d, topo.node_of(rank)));
        Ok(Self {
            pfs_root: params.pfs_dir.clone(),
            bb_root,
            throttle: PfsThrottle::from_params(params)?,
            bb_capacity: params.bb_capacity_mb.map(|mb| (mb * 1e6) as u64),
            drain: None,
        })
    }

    pub fn pfs_root(&self) -> &Path {
        &self.pfs_root
    }

    pub fn bb_root(&self) -> Option<&Path> {
        self.bb_root.as_deref()
    }

    pub fn uses_bb(&self) -> bool {
        self.bb_root.is_some()
    }

    pub fn throttle(&self) -> Option<Arc<PfsThrottle>> {
        self.throttle.clone()
    }

    /// Starts this rank's drain worker. Idempotent.
    pub fn start_drain(&mut self, progress: Option<PathBuf>) {
        if self.bb_root.is_some() && self.drain.is_none() {
            self.drain = Some(DrainWorker::spawn(
                self.throttle.clone(),
                self.bb_capacity,
                progress,
            ));
        }
    }

    pub fn drain(&self) -> Option<&DrainWorker> {
        self.drain.as_ref()
    }

    /// Opens `rel` for writing. `truncate` is false for files shared by
    /// several ranks.
    pub fn open(&mut self, rel: &Path, truncate: bool) -> Result<Sink> {
        let pfs_path = self.pfs_root.join(rel);
        if let Some(parent) = pfs_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        match self.bb_root.clone() {
            Some(bb) => {
                self.start_drain(None);
                let bb_path = bb.join(rel);
                if truncate {
                    // the drain writes into the PFS copy without truncating
                    match std::fs::remove_file(&pfs_path) {
                        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                        _ => {}
                    }
                }
                if let Some(parent) = bb_path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(truncate)
                    .open(&bb_path)?;
                Ok(Sink {
                    pfs_path,
                    target: Target::Bb { file, path: bb_path },
                })
            }
            None => {
                let f = if truncate {
                    PfsFile::create(&pfs_path, self.throttle.clone())?
                } else {
                    PfsFile::open_shared(&pfs_path, self.throttle.clone())?
                };
                Ok(Sink {
                    pfs_path,
                    target: Target::Pfs(f),
                })
            }
        }
    }

    /// Marks a step's segments complete in the drain queue.
    pub fn step_done(&self, step: u64) {
        if let Some(d) = &self.drain {
            d.step_done(step);
        }
    }

    /// Waits for the drain to finish.
    pub fn finish(&mut self) -> Result<Option<DrainStats>> {
        match self.drain.take() {
            Some(d) => d.finish().map(Some),
            None => Ok(None),
        }
    }

    pub fn detach(&mut self) -> Option<DrainWorker> {
        self.drain.take()
    }
}

pub fn node_bb_root(bb_dir: &Path, node: u32) -> PathBuf {
    bb_dir.join(format!("node{node}"))
}

enum Target {
    Pfs(PfsFile),
    Bb { file: File, path: PathBuf },
}

pub struct Sink {
    pfs_path: PathBuf,
    target: Target,
}

impl Sink {
    pub fn pfs_path(&self) -> &Path {
        &self.pfs_path
    }

    /// Writes at `offset`. On a burst buffer this reserves space (possibly
    /// waiting for the drain), writes locally and queues the segment.
    /// Returns the time spent waiting for buffer space.
    pub fn write_at(&self, storage: &Storage, offset: u64, data: &[u8]) -> Result<Duration> {
        if data.is_empty() {
            return Ok(Duration::ZERO);
        }
        match &self.target {
            Target::Pfs(f) => {
                f.write_at(offset, data)?;
                Ok(Duration::ZERO)
            }
            Target::Bb { file, path } => {
                let drain = storage.drain.as_ref().expect("drain started with bb sink");
                let waited = drain.reserve(data.len() as u64);
                file.write_all_at(data, offset)?;
                drain.copy(path, &self.pfs_path, offset, data.len() as u64);
                Ok(waited)
            }
        }
    }

    pub fn sync(&self) -> Result<()> {
        match &self.target {
            Target::Pfs(f) => f.sync(),
            Target::Bb { file, .. } => Ok(file.sync_data()?),
        }
    }
}
