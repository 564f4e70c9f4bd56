use std::collections::HashMap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use super::{data_file, ContainerInfo, INDEX_FILE};
use crate::checksum::crc32c;
use crate::codec::{self, PayloadHeader, StoredPayload};
use crate::error::{Error, Result};
use crate::flatfile::FlatWriter;
use crate::index::index_parse;
use crate::layout::{copy_region, validate_selection, Coverage};
use crate::par;
use crate::types::{BlockRecord, Selection, StepIndex, VariableDef};

pub struct ContainerReader {
    dir: PathBuf,
    info: ContainerInfo,
    steps: Vec<StepIndex>,
    files: Mutex<HashMap<u32, Arc<File>>>,
}

impl ContainerReader {
    /// Only newline-terminated index lines marked complete are visible.
    pub fn open(dir: &Path) -> Result<Self> {
        let info = ContainerInfo::load(dir)?;
        let raw = match std::fs::read(dir.join(INDEX_FILE)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let committed = match raw.iter().rposition(|&b| b == b'\n') {
            Some(i) => &raw[..=i],
            None => &raw[..0],
        };
        let text = std::str::from_utf8(committed)
            .map_err(|e| Error::format(format!("index is not UTF-8: {e}")))?;
        let mut steps = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let idx = index_parse(line)?;
            if idx.complete {
                steps.push(idx);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            steps,
            files: Mutex::new(HashMap::new()),
        })
    }

    pub fn info(&self) -> &ContainerInfo {
        &self.info
    }

    pub fn defs(&self) -> &[VariableDef] {
        &self.info.variables
    }

    pub fn steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.steps.iter().map(|s| s.step)
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step_index(&self, step: u64) -> Option<&StepIndex> {
        self.steps.iter().find(|s| s.step == step)
    }

    fn def(&self, var: &str) -> Result<&VariableDef> {
        self.info
            .variables
            .iter()
            .find(|d| d.name == var)
            .ok_or_else(|| Error::Selection(format!("unknown variable {var:?}")))
    }

    fn subfile(&self, id: u32) -> Result<Arc<File>> {
        let mut files = self.files.lock().unwrap();
        if let Some(f) = files.get(&id) {
            return Ok(f.clone());
        }
        let f = Arc::new(File::open(self.dir.join(data_file(id)))?);
        files.insert(id, f.clone());
        Ok(f)
    }

    /// Reads, decodes and checks one block.
    /// Decodes a block without checking its checksum.
    pub fn decode_block(&self, b: &BlockRecord, elem_size: usize) -> Result<Vec<u8>> {
        let corrupt = || Error::CorruptBlock {
            subfile: b.subfile_id,
            offset: b.offset,
        };
        let f = self.subfile(b.subfile_id)?;
        if b.offset + b.stored_nbytes > f.metadata()?.len() {
            return Err(corrupt());
        }
        let mut body = vec![0u8; b.stored_nbytes as usize];
        f.read_exact_at(&mut body, b.offset)?;
        let p = StoredPayload {
            header: PayloadHeader {
                raw_nbytes: b.raw_nbytes,
                codec: b.codec,
                level: b.level,
                shuffle: b.shuffle,
                elem_size: elem_size as u32,
            },
            body,
        };
        codec::decode(&p).map_err(|_| corrupt())
    }

    pub fn load_block(&self, b: &BlockRecord, elem_size: usize) -> Result<Vec<u8>> {
        let raw = self.decode_block(b, elem_size)?;
        if crc32c(&raw) != b.checksum_raw {
            return Err(Error::CorruptBlock {
                subfile: b.subfile_id,
                offset: b.offset,
            });
        }
        Ok(raw)
    }

    /// Blocks of `var` that describe `step`, falling back to the latest
    /// earlier step for variables declared constant in time.
    fn blocks_at<'a>(&'a self, def: &'a VariableDef, step: u64) -> Result<Vec<&'a BlockRecord>> {
        let idx = self
            .step_index(step)
            .ok_or_else(|| Error::format(format!("step {step} not in container")))?;
        let here: Vec<_> = idx.blocks_for(&def.name).collect();
        if !here.is_empty() || def.step_varying {
            return Ok(here);
        }
        for s in self.steps.iter().rev().filter(|s| s.step < step) {
            let v: Vec<_> = s.blocks_for(&def.name).collect();
            if !v.is_empty() {
                return Ok(v);
            }
        }
        Ok(Vec::new())
    }

    /// Reads `sel` of `var` at `step` into canonical sub-array layout.
    pub fn read(&self, var: &str, step: u64, sel: &Selection) -> Result<Vec<u8>> {
        let def = self.def(var)?;
        validate_selection(sel, def)?;
        let es = def.dtype.elem_size();
        let touched: Vec<(&BlockRecord, Selection)> = self
            .blocks_at(def, step)?
            .into_iter()
            .filter_map(|b| b.selection().intersect(sel).map(|r| (b, r)))
            .collect();
        let decoded = par::map(&touched, |(b, _)| self.load_block(b, es));
        let mut out = vec![0u8; sel.num_elements() as usize * es];
        let mut cov = Coverage::new(sel);
        for ((b, region), raw) in touched.iter().zip(decoded) {
            copy_region(&raw?, &b.selection(), &mut out, sel, region, es);
            cov.mark(region);
        }
        if let Some(gap) = cov.first_gap() {
            return Err(Error::Coverage(format!(
                "{var} step {step}: no block covers element {gap:?}"
            )));
        }
        Ok(out)
    }

    pub fn read_full(&self, var: &str, step: u64) -> Result<Vec<u8>> {
        let sel = self.def(var)?.full_selection();
        self.read(var, step, &sel)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConsolidateReport {
    pub steps: u64,
    pub per_step_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub bytes_written: u64,
}

/// Rewrites a container as one canonical flat file.
pub fn consolidate(dir: &Path, out: &Path) -> Result<ConsolidateReport> {
    let t0 = Instant::now();
    let r = ContainerReader::open(dir)?;
    let mut w = FlatWriter::create(out, r.defs())?;
    let mut report = ConsolidateReport::default();
    for step in r.steps().collect::<Vec<_>>() {
        let ts = Instant::now();
        for def in r.defs() {
            let bytes = r.read_full(&def.name, step)?;
            report.bytes_written += bytes.len() as u64;
            w.write_var(&bytes)?;
        }
        report.per_step_seconds.push(ts.elapsed().as_secs_f64());
    }
    report.steps = w.finish()?;
    report.total_seconds = t0.elapsed().as_secs_f64();
    Ok(report)
}
