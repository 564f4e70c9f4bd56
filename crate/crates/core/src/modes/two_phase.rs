//! Collective two-phase writes into one shared canonical file.
//!
//! Each put follows the MPI-IO collective pattern: ranks allgather their
//! access extents, the aggregate extent is cut into W contiguous file
//! domains (one per writer), and an all-to-all of piece counts tells each
//! writer whom to expect. Phase one ships the pieces; phase two has each
//! writer fill its domain and write it in one request.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use super::{flat_name, prepare_shared};
use crate::comm::Comm;
use crate::container::aggregator_map;
use crate::engine::{
    all_or_nothing, check_defs, check_put, timeout_as_incomplete, CloseMode, CloseSummary,
    StepReport, StepWriter,
};
use crate::error::{Error, Result};
use crate::flatfile;
use crate::layout::runs;
use crate::storage::{Sink, Storage};
use crate::types::{validate_defs, EngineParams, Selection, VariableDef};

const TAG_PIECES: u8 = 28;

/// Element range `[start, end)` of region `i` out of `w`.
pub fn region_bounds(n_elems: u64, w: u32, i: u32) -> (u64, u64) {
    let w = w as u128;
    let n = n_elems as u128;
    ((n * i as u128 / w) as u64, (n * (i as u128 + 1) / w) as u64)
}

pub struct TwoPhaseWriter<'c> {
    comm: &'c Comm,
    defs: Vec<VariableDef>,
    storage: Storage,
    sink: Option<Sink>,
    writers: Vec<u32>,
    step: u64,
    put_time: Duration,
    bb_wait: Duration,
    raw_bytes: u64,
}

impl<'c> TwoPhaseWriter<'c> {
    /// Writers are the ranks `aggregator_map` picks for the configured ratio.
    pub fn open(
        comm: &'c Comm,
        params: &EngineParams,
        defs: &[VariableDef],
        name: &str,
    ) -> Result<Self> {
        params.validate()?;
        validate_defs(defs)?;
        check_defs(comm, defs)?;
        let topo = comm.topology();
        let writers = aggregator_map(topo.world_size, topo.ranks_per_node, params.ratio_for(&topo))?
            .aggregators();
        let rel = PathBuf::from(flat_name(name));
        let mut storage = Storage::new(params, &topo, comm.rank())?;
        prepare_shared(comm, &mut storage, &rel, defs)?;
        let sink = all_or_nothing(comm, || {
            if writers.contains(&comm.rank()) {
                storage.open(&rel, false).map(Some)
            } else {
                Ok(None)
            }
        })?;
        Ok(Self {
            comm,
            defs: defs.to_vec(),
            storage,
            sink,
            writers,
            step: 0,
            put_time: Duration::ZERO,
            bb_wait: Duration::ZERO,
            raw_bytes: 0,
        })
    }

    /// Collective: every rank must put the same variables in the same order.
    pub fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        let vi = check_put(&self.defs, self.step, var, step, sel, bytes)?;
        let def = &self.defs[vi];
        let es = def.dtype.elem_size() as u64;
        let my_runs = runs(sel, &def.shape);
        let w = self.writers.len() as u32;
        let n = def.num_elements();

        let (lo, hi) = my_runs.iter().fold((u64::MAX, 0), |(a, b), r| {
            (a.min(r.canonical), b.max(r.canonical + r.len))
        });
        let ext = self.comm.allgather(&[lo.to_le_bytes(), hi.to_le_bytes()].concat())?;
        let (glo, ghi) = ext.iter().try_fold((u64::MAX, 0u64), |(a, b), e| {
            let word = |i: usize| e.get(i..i + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()));
            match (word(0), word(8)) {
                (Some(l), Some(h)) => Ok((a.min(l), b.max(h))),
                _ => Err(Error::protocol("short extent message")),
            }
        })?;
        if glo != 0 || ghi != n {
            return Err(Error::Coverage(format!(
                "{var} step {step}: ranks cover elements {glo}..{ghi} of {n}"
            )));
        }
        let domain = |j: u32| region_bounds(n, w, j);

        let mut outgoing = Vec::with_capacity(self.writers.len());
        let mut counts = vec![Vec::new(); self.comm.size() as usize];
        for (j, &owner) in self.writers.iter().enumerate() {
            let (lo, hi) = domain(j as u32);
            let mut table = Vec::new();
            let mut data = Vec::new();
            let mut count = 0u32;
            for r in &my_runs {
                let s = r.canonical.max(lo);
                let e = (r.canonical + r.len).min(hi);
                if s >= e {
                    continue;
                }
                let local = r.local + (s - r.canonical);
                table.extend_from_slice(&(s - lo).to_le_bytes());
                table.extend_from_slice(&(e - s).to_le_bytes());
                data.extend_from_slice(&bytes[(local * es) as usize..(local + e - s) as usize * es as usize]);
                count += 1;
            }
            counts[owner as usize] = count.to_le_bytes().to_vec();
            outgoing.push((owner, count, table, data));
        }
        let expect = self.comm.alltoall(counts)?;

        // phase 1: ship non-empty piece lists to domain owners
        for (owner, count, table, data) in &outgoing {
            if *count == 0 {
                continue;
            }
            let head = [(vi as u32).to_le_bytes(), count.to_le_bytes()].concat();
            self.comm.send_parts(*owner, TAG_PIECES, &[&head, table, data])?;
        }

        // phase 2: owners assemble their region and write it at its offset
        if let Some(j) = self.writers.iter().position(|&o| o == self.comm.rank()) {
            let (lo, hi) = domain(j as u32);
            let mut region = vec![0u8; ((hi - lo) * es) as usize];
            let mut filled = 0u64;
            for (src, c) in expect.iter().enumerate() {
                if c.iter().all(|&b| b == 0) {
                    continue;
                }
                let m = self
                    .comm
                    .recv(Some(src as u32), TAG_PIECES)
                    .map_err(timeout_as_incomplete(self.step))?
                    .1;
                filled += place_pieces(&m, vi, es, &mut region)?;
            }
            if filled != hi - lo {
                return Err(Error::Coverage(format!(
                    "{var} step {step}: region {j} received {filled} of {} elements",
                    hi - lo
                )));
            }
            let off = flatfile::var_offset(&self.defs, self.step, vi) + lo * es;
            let sink = self.sink.as_ref().expect("writer has the shared file open");
            self.bb_wait += sink.write_at(&self.storage, off, &region)?;
        }
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
            if let Some(s) = &self.sink {
                if self.comm.rank() == 0 {
                    s.write_at(&self.storage, 0, &flatfile::header_bytes(&self.defs, self.step))?;
                }
                s.sync()?;
            }
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

/// Copies one phase-one message into `region`; returns elements placed.
fn place_pieces(m: &[u8], var: usize, es: u64, region: &mut [u8]) -> Result<u64> {
    let short = || Error::protocol("short two-phase message");
    let word = |i: usize| m.get(i..i + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()));
    if word(0).ok_or_else(short)? as usize != var {
        return Err(Error::protocol("two-phase puts out of order across ranks"));
    }
    let count = word(4).ok_or_else(short)? as usize;
    let mut data = 8 + 16 * count;
    let mut placed = 0;
    for k in 0..count {
        let at = 8 + 16 * k;
        let off = u64::from_le_bytes(m.get(at..at + 8).ok_or_else(short)?.try_into().unwrap());
        let len = u64::from_le_bytes(m.get(at + 8..at + 16).ok_or_else(short)?.try_into().unwrap());
        let nb = (len * es) as usize;
        let dst = (off * es) as usize;
        let src = m.get(data..data + nb).ok_or_else(short)?;
        region
            .get_mut(dst..dst + nb)
            .ok_or_else(|| Error::protocol("piece outside region"))?
            .copy_from_slice(src);
        data += nb;
        placed += len;
    }
    Ok(placed)
}

impl StepWriter for TwoPhaseWriter<'_> {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        TwoPhaseWriter::put(self, var, step, sel, bytes)
    }

    fn end_step(&mut self) -> Result<StepReport> {
        TwoPhaseWriter::end_step(self)
    }

    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary> {
        TwoPhaseWriter::close(*self, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_partition_the_range() {
        for n in [0u64, 1, 7, 100, 1001] {
            for w in 1..6 {
                let mut next = 0;
                for i in 0..w {
                    let (s, e) = region_bounds(n, w, i);
                    assert_eq!(s, next);
                    assert!(e - s <= n / w as u64 + 1);
                    next = e;
                }
                assert_eq!(next, n);
            }
        }
    }
}
