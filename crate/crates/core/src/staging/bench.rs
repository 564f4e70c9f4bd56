//! Point-to-point comparison of the two dataplanes against one data server.

use std::io::{BufReader, BufWriter};
use std::time::{Duration, Instant};

use memmap2::Mmap;
use serde::Serialize;

use super::server::DataServer;
use super::{msg, protocol_err, shm_root, GetReq, HelloR, Release, PROTOCOL_VERSION};
use crate::codec::{payload_from_wire, Codec};
use crate::comm::connect_retry;
use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame};
use crate::types::{BlockRecord, DataplaneKind};

pub const BENCH_CSV_HEADER: &str = "dataplane,payload_bytes,blocks,mean_latency_us,throughput_mib_s";

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub dataplane: DataplaneKind,
    pub payload_bytes: u64,
    pub blocks: u32,
    pub mean_latency_us: f64,
    /// Zero for empty payloads.
    pub throughput_mib_s: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3}",
            self.dataplane.name(),
            self.payload_bytes,
            self.blocks,
            self.mean_latency_us,
            self.throughput_mib_s
        )
    }
}

fn pattern(i: usize, n: usize) -> Vec<u8> {
    (0..n).map(|j| (i * 31 + j * 7) as u8).collect()
}

fn record(i: usize, n: usize, offset: u64) -> BlockRecord {
    BlockRecord {
        var: format!("b{i}"),
        step: 0,
        writer_rank: 0,
        start: vec![0],
        count: vec![n as u64],
        subfile_id: 0,
        offset,
        stored_nbytes: n as u64,
        raw_nbytes: n as u64,
        codec: Codec::None,
        level: 0,
        shuffle: false,
        checksum_raw: 0,
        stat_min: 0.0,
        stat_max: 0.0,
    }
}

/// Moves `blocks` blocks of each size over each dataplane and checks every
/// byte. Returns two rows per size, tcp first.
pub fn dataplane_bench(sizes: &[u64], blocks: u32) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for kind in [DataplaneKind::Tcp, DataplaneKind::Shm] {
            rows.push(bench_one(kind, size as usize, blocks as usize)?);
        }
    }
    Ok(rows)
}

fn bench_one(kind: DataplaneKind, size: usize, blocks: usize) -> Result<BenchRow> {
    let server = DataServer::start("127.0.0.1:0")?;
    let seg = (kind == DataplaneKind::Shm).then(|| {
        shm_root().join(format!("miniio-bench-{}-{size}", std::process::id()))
    });
    let held = (0..blocks)
        .map(|i| (record(i, size, (i * size) as u64), 1, pattern(i, size)))
        .collect();
    server.register(0, held, seg.clone())?;
    server.decide(0, Some(&[0]));

    let s = connect_retry(server.addr(), Duration::from_secs(5))?;
    let mut r = BufReader::new(s.try_clone()?);
    let mut w = BufWriter::new(s);
    let hello = HelloR {
        version: PROTOCOL_VERSION,
        hostname: super::hostname(),
        reader_id: Some(0),
    };
    write_frame(&mut w, msg::HELLO_R, &serde_json::to_vec(&hello)?)?;

    let mut total = Duration::ZERO;
    match &seg {
        None => {
            for i in 0..blocks {
                let t0 = Instant::now();
                let req = GetReq {
                    step: 0,
                    var: format!("b{i}"),
                };
                write_frame(&mut w, msg::GET_REQ, &serde_json::to_vec(&req)?)?;
                let body = match read_frame(&mut r)? {
                    Some((msg::DATA, p)) => payload_from_wire(&p, None)?.body,
                    Some((msg::ERR, p)) => return Err(protocol_err(&p)),
                    _ => return Err(Error::protocol("bench: no DATA reply")),
                };
                total += t0.elapsed();
                check(&body, i, size)?;
            }
        }
        Some(path) => {
            let f = std::fs::File::open(path)?;
            let map = if f.metadata()?.len() == 0 {
                None
            } else {
                Some(unsafe { Mmap::map(&f)? })
            };
            let seg: &[u8] = map.as_deref().unwrap_or(&[]);
            for i in 0..blocks {
                let t0 = Instant::now();
                let body = seg[i * size..(i + 1) * size].to_vec();
                total += t0.elapsed();
                check(&body, i, size)?;
            }
        }
    }
    write_frame(&mut w, msg::STEP_RELEASE, &serde_json::to_vec(&Release { step: 0 })?)?;
    write_frame(&mut w, msg::CLOSE, &[])?;
    server.drain_all(Duration::from_secs(5));

    let secs = total.as_secs_f64();
    let bytes = (size * blocks) as f64;
    Ok(BenchRow {
        dataplane: kind,
        payload_bytes: size as u64,
        blocks: blocks as u32,
        mean_latency_us: if blocks == 0 { 0.0 } else { secs * 1e6 / blocks as f64 },
        throughput_mib_s: if bytes == 0.0 || secs == 0.0 {
            0.0
        } else {
            bytes / secs / (1024.0 * 1024.0)
        },
    })
}

fn check(body: &[u8], i: usize, size: usize) -> Result<()> {
    if body != pattern(i, size).as_slice() {
        return Err(Error::protocol(format!("bench block {i} came back altered")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_per_size_and_empty_payloads() {
        let rows = dataplane_bench(&[0, 4096], 8).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].dataplane, DataplaneKind::Tcp);
        assert_eq!(rows[1].dataplane, DataplaneKind::Shm);
        assert_eq!(rows[0].throughput_mib_s, 0.0);
        assert!(rows[2].throughput_mib_s > 0.0);
        assert_eq!(rows[3].csv().split(',').count(), BENCH_CSV_HEADER.split(',').count());
    }
}
