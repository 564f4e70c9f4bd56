//! Parallel file system model: one shared service timeline across every
//! process writing under the same PFS directory.
//!
//! Each request costs `op_cost + bytes / bandwidth`. Requests are queued on a
//! virtual clock kept in a lock-protected state file, so concurrent writers
//! in different processes share the bandwidth instead of multiplying it.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::error::Result;
use crate::types::EngineParams;

pub const STATE_FILE: &str = ".pfs-throttle";

/// Largest single request; longer writes are split.
pub const MAX_REQUEST: usize = 4 << 20;

#[derive(Debug)]
pub struct PfsThrottle {
    state: PathBuf,
    bytes_per_sec: Option<f64>,
    op_cost: Duration,
}

fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after epoch")
        .as_nanos() as u64
}

impl PfsThrottle {
    /// `None` when neither a bandwidth cap nor a per-request cost applies.
    pub fn new(pfs_dir: &Path, bw_mbps: Option<f64>, op_us: u64) -> Result<Option<Arc<Self>>> {
        if bw_mbps.is_none() && op_us == 0 {
            return Ok(None);
        }
        std::fs::create_dir_all(pfs_dir)?;
        Ok(Some(Arc::new(Self {
            state: pfs_dir.join(STATE_FILE),
            bytes_per_sec: bw_mbps.map(|m| m * 1e6),
            op_cost: Duration::from_micros(op_us),
        })))
    }

    pub fn from_params(p: &EngineParams) -> Result<Option<Arc<Self>>> {
        Self::new(&p.pfs_dir, p.pfs_bw_mbps, p.pfs_op_cost_us())
    }

    pub fn request_cost(&self, nbytes: u64) -> Duration {
        let transfer = self
            .bytes_per_sec
            .map_or(Duration::ZERO, |b| Duration::from_secs_f64(nbytes as f64 / b));
        self.op_cost + transfer
    }

    /// Books one request on the shared timeline and sleeps until it completes.
    pub fn acquire(&self, nbytes: u64) -> Result<()> {
        let cost = self.request_cost(nbytes).as_nanos() as u64;
        let end = {
            let mut f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(&self.state)?;
            f.lock()?;
            let mut buf = [0u8; 8];
            let next_free = match f.read(&mut buf)? {
                8 => u64::from_le_bytes(buf),
                _ => 0,
            };
            let start = now_ns().max(next_free);
            let end = start + cost;
            f.seek(SeekFrom::Start(0))?;
            f.write_all(&end.to_le_bytes())?;
            f.unlock()?;
            end
        };
        let now = now_ns();
        if end > now {
            thread::sleep(Duration::from_nanos(end - now));
        }
        Ok(())
    }
}

/// A file on the PFS whose writes go through the shared throttle.
#[derive(Debug)]
pub struct PfsFile {
    file: File,
    throttle: Option<Arc<PfsThrottle>>,
}

impl PfsFile {
    pub fn create(path: &Path, throttle: Option<Arc<PfsThrottle>>) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        if let Some(t) = &throttle {
            t.acquire(0)?;
        }
        Ok(Self { file, throttle })
    }

    /// Opens without truncating (shared files written by several ranks).
    pub fn open_shared(path: &Path, throttle: Option<Arc<PfsThrottle>>) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        if let Some(t) = &throttle {
            t.acquire(0)?;
        }
        Ok(Self { file, throttle })
    }

    pub fn write_at(&self, mut offset: u64, data: &[u8]) -> Result<()> {
        for chunk in data.chunks(MAX_REQUEST) {
            if let Some(t) = &self.throttle {
                t.acquire(chunk.len() as u64)?;
            }
            self.file.write_all_at(chunk, offset)?;
            offset += chunk.len() as u64;
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }

    pub fn len(&self) -> Result<u64> {
        Ok(self.file.metadata()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}
