//! One part file per rank: "PFP1", raw patches in put order, a JSON footer,
//! then the u64 LE footer length and "PFPE".

use std::collections::HashMap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::fpp_dir_name;
use crate::checksum::crc32c;
use crate::comm::Comm;
use crate::engine::{all_or_nothing, check_defs, check_put, CloseMode, CloseSummary, StepReport, StepWriter};
use crate::error::{Error, Result};
use crate::flatfile::FlatWriter;
use crate::layout::{copy_region, Coverage};
use crate::storage::{Sink, Storage};
use crate::types::{validate_defs, EngineParams, Selection, VariableDef};

pub const PART_MAGIC: &[u8; 4] = b"PFP1";
pub const END_MAGIC: &[u8; 4] = b"PFPE";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartRecord {
    var: String,
    step: u64,
    start: Vec<u64>,
    count: Vec<u64>,
    offset: u64,
    nbytes: u64,
    crc32c: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartFooter {
    rank: u32,
    world_size: u32,
    steps: u64,
    variables: Vec<VariableDef>,
    records: Vec<PartRecord>,
}

pub fn part_name(rank: u32) -> String {
    format!("part.{rank}")
}

pub struct FppWriter<'c> {
    comm: &'c Comm,
    defs: Vec<VariableDef>,
    storage: Storage,
    sink: Sink,
    offset: u64,
    records: Vec<PartRecord>,
    step: u64,
    put_time: Duration,
    bb_wait: Duration,
    raw_bytes: u64,
}

impl<'c> FppWriter<'c> {
    pub fn open(
        comm: &'c Comm,
        params: &EngineParams,
        defs: &[VariableDef],
        name: &str,
    ) -> Result<Self> {
        params.validate()?;
        validate_defs(defs)?;
        check_defs(comm, defs)?;
        let rel = PathBuf::from(fpp_dir_name(name));
        let topo = comm.topology();
        let rank = comm.rank();
        let mut storage = Storage::new(params, &topo, rank)?;
        all_or_nothing(comm, || {
            let remove = |p: PathBuf| match std::fs::remove_dir_all(p) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            };
            if rank == 0 {
                remove(storage.pfs_root().join(&rel))?;
            }
            if rank % topo.ranks_per_node == 0 {
                if let Some(bb) = storage.bb_root() {
                    remove(bb.join(&rel))?;
                }
            }
            Ok(())
        })?;
        let sink = all_or_nothing(comm, || {
            let s = storage.open(&rel.join(part_name(rank)), true)?;
            s.write_at(&storage, 0, PART_MAGIC)?;
            Ok(s)
        })?;
        Ok(Self {
            comm,
            defs: defs.to_vec(),
            storage,
            sink,
            offset: PART_MAGIC.len() as u64,
            records: Vec::new(),
            step: 0,
            put_time: Duration::ZERO,
            bb_wait: Duration::ZERO,
            raw_bytes: 0,
        })
    }

    pub fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        check_put(&self.defs, self.step, var, step, sel, bytes)?;
        self.bb_wait += self.sink.write_at(&self.storage, self.offset, bytes)?;
        self.records.push(PartRecord {
            var: var.to_string(),
            step,
            start: sel.start.clone(),
            count: sel.count.clone(),
            offset: self.offset,
            nbytes: bytes.len() as u64,
            crc32c: crc32c(bytes),
        });
        self.offset += bytes.len() as u64;
        self.raw_bytes += bytes.len() as u64;
        self.put_time += t0.elapsed();
        Ok(())
    }

    pub fn end_step(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        self.storage.step_done(self.step);
        self.comm.barrier()?;
        let r = StepReport {
            step: self.step,
            perceived_write_seconds: (self.put_time + t0.elapsed()).as_secs_f64(),
            bb_wait_seconds: self.bb_wait.as_secs_f64(),
            raw_bytes: self.raw_bytes,
            stored_bytes: self.raw_bytes,
            skipped: false,
        };
        self.step += 1;
        self.put_time = Duration::ZERO;
        self.bb_wait = Duration::ZERO;
        self.raw_bytes = 0;
        Ok(r)
    }

    pub fn close(mut self, mode: CloseMode) -> Result<CloseSummary> {
        let t0 = Instant::now();
        let mut summary = CloseSummary {
            steps: self.step,
            ..Default::default()
        };
        all_or_nothing(self.comm, || {
            let footer = PartFooter {
                rank: self.comm.rank(),
                world_size: self.comm.size(),
                steps: self.step,
                variables: self.defs.clone(),
                records: std::mem::take(&mut self.records),
            };
            let mut tail = serde_json::to_vec(&footer)?;
            let n = tail.len() as u64;
            tail.extend_from_slice(&n.to_le_bytes());
            tail.extend_from_slice(END_MAGIC);
            self.sink.write_at(&self.storage, self.offset, &tail)?;
            self.sink.sync()?;
            match mode {
                CloseMode::Wait => summary.drain = self.storage.finish()?,
                CloseMode::Detach => summary.detached = self.storage.detach(),
            }
            Ok(())
        })?;
        summary.close_seconds = t0.elapsed().as_secs_f64();
        Ok(summary)
    }
}

impl StepWriter for FppWriter<'_> {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        FppWriter::put(self, var, step, sel, bytes)
    }

    fn end_step(&mut self) -> Result<StepReport> {
        FppWriter::end_step(self)
    }

    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary> {
        FppWriter::close(*self, mode)
    }
}

fn read_footer(path: &Path) -> Result<(File, PartFooter)> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    let bad = |m: &str| Error::format(format!("{}: {m}", path.display()));
    if len < 16 {
        return Err(bad("too short for a part file"));
    }
    let mut head = [0u8; 4];
    f.read_exact_at(&mut head, 0)?;
    let mut tail = [0u8; 12];
    f.read_exact_at(&mut tail, len - 12)?;
    if &head != PART_MAGIC || &tail[8..] != END_MAGIC {
        return Err(bad("bad magic"));
    }
    let n = u64::from_le_bytes(tail[..8].try_into().unwrap());
    if n + 16 > len {
        return Err(bad("footer length out of range"));
    }
    let mut json = vec![0u8; n as usize];
    f.read_exact_at(&mut json, len - 12 - n)?;
    Ok((f, serde_json::from_slice(&json)?))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StitchReport {
    pub parts: usize,
    pub steps: u64,
    pub seconds: f64,
    pub bytes_written: u64,
}

/// Merges a `<name>.fpp` directory into one canonical flat file.
pub fn stitch(dir: &Path, out: &Path) -> Result<StitchReport> {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(r) = name.strip_prefix("part.").and_then(|r| r.parse::<u32>().ok()) {
            parts.push((r, e.path()));
        }
    }
    parts.sort();
    if parts.is_empty() {
        return Err(Error::format(format!("{}: no part files", dir.display())));
    }
    let footers = parts
        .iter()
        .map(|(_, p)| read_footer(p))
        .collect::<Result<Vec<_>>>()?;
    let (defs, steps, world) = {
        let f = &footers[0].1;
        (f.variables.clone(), f.steps, f.world_size)
    };
    if footers.len() != world as usize {
        return Err(Error::format(format!(
            "found {} part files for a world of {world}",
            footers.len()
        )));
    }
    for (_, f) in &footers {
        if f.variables != defs || f.steps != steps || f.world_size != world {
            return Err(Error::format(format!("part {} disagrees with part 0", f.rank)));
        }
    }
    let mut by_key: HashMap<(u64, &str), Vec<(&File, u32, &PartRecord)>> = HashMap::new();
    for (file, f) in &footers {
        for r in &f.records {
            by_key.entry((r.step, r.var.as_str())).or_default().push((file, f.rank, r));
        }
    }
    let mut w = FlatWriter::create(out, &defs)?;
    let mut report = StitchReport {
        parts: footers.len(),
        ..Default::default()
    };
    let mut constants: HashMap<&str, Vec<u8>> = HashMap::new();
    for step in 0..steps {
        for d in &defs {
            let full = d.full_selection();
            let es = d.dtype.elem_size();
            let recs = by_key.get(&(step, d.name.as_str()));
            let arr = match recs {
                None if !d.step_varying && constants.contains_key(d.name.as_str()) => {
                    constants[d.name.as_str()].clone()
                }
                _ => {
                    let mut arr = vec![0u8; d.nbytes() as usize];
                    let mut cov = Coverage::new(&full);
                    for (file, rank, r) in recs.into_iter().flatten() {
                        let mut buf = vec![0u8; r.nbytes as usize];
                        file.read_exact_at(&mut buf, r.offset)?;
                        if crc32c(&buf) != r.crc32c {
                            return Err(Error::CorruptBlock {
                                subfile: *rank,
                                offset: r.offset,
                            });
                        }
                        let sel = Selection::new(r.start.clone(), r.count.clone());
                        crate::layout::validate_selection(&sel, d)?;
                        copy_region(&buf, &sel, &mut arr, &full, &sel, es);
                        cov.mark(&sel);
                    }
                    if let Some(gap) = cov.first_gap() {
                        return Err(Error::Coverage(format!(
                            "{} step {step}: no part covers element {gap:?}",
                            d.name
                        )));
                    }
                    if !d.step_varying {
                        constants.insert(d.name.as_str(), arr.clone());
                    }
                    arr
                }
            };
            report.bytes_written += arr.len() as u64;
            w.write_var(&arr)?;
        }
    }
    report.steps = w.finish()?;
    report.seconds = t0.elapsed().as_secs_f64();
    Ok(report)
}
