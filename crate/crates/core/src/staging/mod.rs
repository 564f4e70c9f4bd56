//! Network staging: writers keep each step in memory and announce it to
//! live readers, which pull blocks over a stream socket or map them from
//! shared memory, then release the step.
//!
//! Rank 0 serves the control connection. Every rank serves its own blocks.

mod bench;
mod reader;
mod server;
mod writer;

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DataplaneKind, VariableDef};

pub use bench::{dataplane_bench, BenchRow, BENCH_CSV_HEADER};
pub use reader::{ReaderOptions, StageReader};
pub use writer::{StageStats, StageWriter};

pub const PROTOCOL_VERSION: u32 = 1;
pub const ENDPOINT_ENV: &str = "MINIIO_ENDPOINT";

pub mod msg {
    pub const HELLO_R: u8 = 1;
    pub const HELLO_W: u8 = 2;
    pub const STEP_ANNOUNCE: u8 = 3;
    pub const GET_REQ: u8 = 4;
    pub const DATA: u8 = 5;
    pub const STEP_RELEASE: u8 = 6;
    pub const CLOSE: u8 = 7;
    pub const ERR: u8 = 8;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HelloR {
    pub version: u32,
    pub hostname: String,
    /// Set on data connections so the rank can attribute releases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reader_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataplaneDescriptor {
    pub kind: DataplaneKind,
    /// Data endpoint of each writer rank; releases go here for both kinds.
    pub endpoints: Vec<String>,
    /// Segment path with `{rank}` and `{step}` placeholders (shm only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shm_pattern: Option<String>,
}

impl DataplaneDescriptor {
    pub fn shm_path(&self, rank: u32, step: u64) -> Option<PathBuf> {
        self.shm_pattern.as_ref().map(|p| {
            PathBuf::from(
                p.replace("{rank}", &rank.to_string())
                    .replace("{step}", &step.to_string()),
            )
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HelloW {
    pub version: u32,
    pub reader_id: u32,
    pub variables: Vec<VariableDef>,
    pub world_size: u32,
    pub dataplane: DataplaneDescriptor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GetReq {
    pub step: u64,
    pub var: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Release {
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrMsg {
    pub message: String,
}

pub fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "localhost".into())
}

/// `MINIIO_ENDPOINT` wins over the configured endpoint.
pub fn resolve_endpoint(configured: Option<&str>) -> Option<String> {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| configured.map(str::to_string))
}

pub(crate) fn parse_addr(s: &str) -> Result<SocketAddr> {
    s.to_socket_addrs()
        .map_err(|e| Error::config(format!("bad endpoint {s:?}: {e}")))?
        .next()
        .ok_or_else(|| Error::config(format!("endpoint {s:?} resolves to nothing")))
}

/// Contact file a writer leaves next to its would-be output so readers can
/// find an ephemeral endpoint.
pub fn contact_file(pfs_dir: &std::path::Path, name: &str) -> PathBuf {
    pfs_dir.join(format!("{name}.sst"))
}

pub(crate) fn shm_root() -> PathBuf {
    let dev = PathBuf::from("/dev/shm");
    if dev.is_dir() {
        dev
    } else {
        std::env::temp_dir()
    }
}

pub(crate) fn err_frame(message: impl Into<String>) -> Vec<u8> {
    serde_json::to_vec(&ErrMsg {
        message: message.into(),
    })
    .expect("serializes")
}

pub(crate) fn protocol_err(payload: &[u8]) -> Error {
    match serde_json::from_slice::<ErrMsg>(payload) {
        Ok(e) => Error::Protocol(e.message),
        Err(_) => Error::protocol("peer sent ERR"),
    }
}
