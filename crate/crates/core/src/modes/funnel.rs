use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use super::{decode_patch, encode_patch, flat_name, prepare_shared};
use crate::comm::Comm;
use crate::engine::{
    all_or_nothing, check_defs, check_put, timeout_as_incomplete, CloseMode, CloseSummary,
    StepReport, StepWriter,
};
use crate::error::{Error, Result};
use crate::flatfile;
use crate::layout::{copy_region, Coverage};
use crate::storage::{Sink, Storage};
use crate::types::{validate_defs, EngineParams, Selection, VariableDef};

const TAG_PATCH: u8 = 24;
const TAG_END: u8 = 25;

/// Every rank ships its patches to rank 0, which assembles whole arrays and
/// writes them alone.
pub struct FunnelWriter<'c> {
    comm: &'c Comm,
    defs: Vec<VariableDef>,
    storage: Storage,
    sink: Option<Sink>,
    step: u64,
    put_time: Duration,
    local: Vec<(usize, Selection, Vec<u8>)>,
    sent: u32,
    raw_bytes: u64,
    constants: HashMap<usize, Vec<u8>>,
}

impl<'c> FunnelWriter<'c> {
    pub fn open(
        comm: &'c Comm,
        params: &EngineParams,
        defs: &[VariableDef],
        name: &str,
    ) -> Result<Self> {
        params.validate()?;
        validate_defs(defs)?;
        check_defs(comm, defs)?;
        let rel = PathBuf::from(flat_name(name));
        let mut storage = Storage::new(params, &comm.topology(), comm.rank())?;
        prepare_shared(comm, &mut storage, &rel, defs)?;
        let sink = all_or_nothing(comm, || {
            if comm.rank() == 0 {
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
            step: 0,
            put_time: Duration::ZERO,
            local: Vec::new(),
            sent: 0,
            raw_bytes: 0,
            constants: HashMap::new(),
        })
    }

    pub fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        let i = check_put(&self.defs, self.step, var, step, sel, bytes)?;
        if self.comm.rank() == 0 {
            self.local.push((i, sel.clone(), bytes.to_vec()));
        } else {
            self.comm.send(0, TAG_PATCH, &encode_patch(i, sel, bytes))?;
            self.sent += 1;
        }
        self.raw_bytes += bytes.len() as u64;
        self.put_time += t0.elapsed();
        Ok(())
    }

    fn assemble(&mut self) -> Result<Vec<u8>> {
        let mut arrays: Vec<Vec<u8>> = self.defs.iter().map(|d| vec![0u8; d.nbytes() as usize]).collect();
        let mut cov: Vec<Coverage> = self.defs.iter().map(|d| Coverage::new(&d.full_selection())).collect();
        let mut touched = vec![false; self.defs.len()];
        let mut place = |i: usize, sel: &Selection, bytes: &[u8], defs: &[VariableDef]| -> Result<()> {
            let d = defs.get(i).ok_or_else(|| Error::protocol("patch for unknown variable"))?;
            let full = d.full_selection();
            copy_region(bytes, sel, &mut arrays[i], &full, sel, d.dtype.elem_size());
            cov[i].mark(sel);
            touched[i] = true;
            Ok(())
        };
        for (i, sel, bytes) in std::mem::take(&mut self.local) {
            place(i, &sel, &bytes, &self.defs)?;
        }
        for r in 1..self.comm.size() {
            let p = self.comm.recv(Some(r), TAG_END).map_err(timeout_as_incomplete(self.step))?.1;
            let n = p
                .get(..4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::protocol("short end message"))?;
            for _ in 0..n {
                let m = self.comm.recv(Some(r), TAG_PATCH).map_err(timeout_as_incomplete(self.step))?.1;
                let (i, sel, bytes) = decode_patch(&m)?;
                place(i, &sel, bytes, &self.defs)?;
            }
        }
        drop(place);
        let mut out = Vec::with_capacity(flatfile::step_nbytes(&self.defs) as usize);
        for (i, d) in self.defs.iter().enumerate() {
            if !cov[i].is_complete() {
                match self.constants.get(&i) {
                    Some(prev) if !d.step_varying && !touched[i] => {
                        out.extend_from_slice(prev);
                        continue;
                    }
                    _ => {
                        return Err(Error::Coverage(format!(
                            "{} step {}: no patch covers element {:?}",
                            d.name,
                            self.step,
                            cov[i].first_gap().unwrap()
                        )))
                    }
                }
            }
            if !d.step_varying {
                self.constants.insert(i, arrays[i].clone());
            }
            out.extend_from_slice(&arrays[i]);
        }
        Ok(out)
    }

    pub fn end_step(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        let mut waited = Duration::ZERO;
        if self.comm.rank() == 0 {
            let buf = self.assemble()?;
            let off = flatfile::var_offset(&self.defs, self.step, 0);
            waited = self.sink.as_ref().unwrap().write_at(&self.storage, off, &buf)?;
            self.storage.step_done(self.step);
        } else {
            self.comm.send(0, TAG_END, &self.sent.to_le_bytes())?;
        }
        self.comm.barrier()?;
        let r = StepReport {
            step: self.step,
            perceived_write_seconds: (self.put_time + t0.elapsed()).as_secs_f64(),
            bb_wait_seconds: waited.as_secs_f64(),
            raw_bytes: self.raw_bytes,
            stored_bytes: self.raw_bytes,
            skipped: false,
        };
        self.step += 1;
        self.put_time = Duration::ZERO;
        self.sent = 0;
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
                s.write_at(&self.storage, 0, &flatfile::header_bytes(&self.defs, self.step))?;
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

impl StepWriter for FunnelWriter<'_> {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        FunnelWriter::put(self, var, step, sel, bytes)
    }

    fn end_step(&mut self) -> Result<StepReport> {
        FunnelWriter::end_step(self)
    }

    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary> {
        FunnelWriter::close(*self, mode)
    }
}
