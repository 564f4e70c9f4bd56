//! Canonical flat file: "CFF1", u64 LE header length, header JSON, then for
//! each step and each variable in definition order the full global array in
//! canonical layout.
//!
//! The header JSON is padded with spaces so the data section starts on a
//! 4096-byte boundary that does not depend on the step count; writers that
//! learn the step count only at close can rewrite the header in place.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::VariableDef;

pub const MAGIC: &[u8; 4] = b"CFF1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatHeader {
    pub format_version: u32,
    pub steps: u64,
    pub variables: Vec<VariableDef>,
}

fn header_json(defs: &[VariableDef], steps: u64) -> Vec<u8> {
    serde_json::to_vec(&FlatHeader {
        format_version: FORMAT_VERSION,
        steps,
        variables: defs.to_vec(),
    })
    .expect("header serializes")
}

/// Bytes before the data section.
pub fn data_start(defs: &[VariableDef]) -> u64 {
    let worst = header_json(defs, u64::MAX).len() as u64 + 12;
    worst.div_ceil(ALIGN) * ALIGN
}

/// Magic, length and padded header for `steps` steps.
pub fn header_bytes(defs: &[VariableDef], steps: u64) -> Vec<u8> {
    let start = data_start(defs) as usize;
    let mut json = header_json(defs, steps);
    json.resize(start - 12, b' ');
    let mut out = Vec::with_capacity(start);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn step_nbytes(defs: &[VariableDef]) -> u64 {
    defs.iter().map(|d| d.nbytes()).sum()
}

/// File offset of variable `var_index` at `step`.
pub fn var_offset(defs: &[VariableDef], step: u64, var_index: usize) -> u64 {
    data_start(defs)
        + step * step_nbytes(defs)
        + defs[..var_index].iter().map(|d| d.nbytes()).sum::<u64>()
}

/// Sequential writer used by consolidation and stitching.
pub struct FlatWriter {
    out: BufWriter<File>,
    defs: Vec<VariableDef>,
    steps: u64,
    next_var: usize,
}

impl FlatWriter {
    pub fn create(path: &Path, defs: &[VariableDef]) -> Result<Self> {
        let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
        out.write_all(&header_bytes(defs, 0))?;
        Ok(Self {
            out,
            defs: defs.to_vec(),
            steps: 0,
            next_var: 0,
        })
    }

    /// Appends the next variable of the current step.
    pub fn write_var(&mut self, bytes: &[u8]) -> Result<()> {
        let def = &self.defs[self.next_var];
        if bytes.len() as u64 != def.nbytes() {
            return Err(Error::Shape(format!(
                "{}: {} bytes, expected {}",
                def.name,
                bytes.len(),
                def.nbytes()
            )));
        }
        self.out.write_all(bytes)?;
        self.next_var += 1;
        if self.next_var == self.defs.len() {
            self.next_var = 0;
            self.steps += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<u64> {
        if self.next_var != 0 {
            return Err(Error::format("flat file closed mid-step"));
        }
        let file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.write_all_at(&header_bytes(&self.defs, self.steps), 0)?;
        file.sync_all()?;
        Ok(self.steps)
    }
}

pub struct FlatReader {
    file: File,
    header: FlatHeader,
}

impl FlatReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut head = [0u8; 12];
        file.read_exact(&mut head)
            .map_err(|_| Error::format("flat file shorter than its header"))?;
        if &head[..4] != MAGIC {
            return Err(Error::format("bad magic, not a CFF1 file"));
        }
        let len = u64::from_le_bytes(head[4..].try_into().unwrap());
        if len > 1 << 30 {
            return Err(Error::format("implausible header length"));
        }
        let mut json = vec![0u8; len as usize];
        file.read_exact(&mut json)?;
        let header: FlatHeader = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        if 12 + len != data_start(&header.variables) {
            return Err(Error::format("header length does not match layout"));
        }
        let need = data_start(&header.variables) + header.steps * step_nbytes(&header.variables);
        if file.metadata()?.len() < need {
            return Err(Error::format("flat file truncated"));
        }
        Ok(Self { file, header })
    }

    pub fn header(&self) -> &FlatHeader {
        &self.header
    }

    pub fn defs(&self) -> &[VariableDef] {
        &self.header.variables
    }

    pub fn steps(&self) -> u64 {
        self.header.steps
    }

    pub fn read_var(&self, var: &str, step: u64) -> Result<Vec<u8>> {
        let i = self
            .header
            .variables
            .iter()
            .position(|d| d.name == var)
            .ok_or_else(|| Error::format(format!("no variable {var:?}")))?;
        if step >= self.header.steps {
            return Err(Error::format(format!("no step {step}")));
        }
        let def = &self.header.variables[i];
        let mut buf = vec![0u8; def.nbytes() as usize];
        self.file
            .read_exact_at(&mut buf, var_offset(&self.header.variables, step, i))?;
        Ok(buf)
    }
}
