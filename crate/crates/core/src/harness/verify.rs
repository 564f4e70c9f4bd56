//! Bit-exact comparison of a run's output against the field generator.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::run::capture_steps_path;
use super::WorkloadSpec;
use crate::checksum::crc32c;
use crate::container::{ContainerReader, INFO_FILE};
use crate::error::Result;
use crate::flatfile::FlatReader;
use crate::layout::{canonical_point, Coverage};
use crate::modes::stitch;
use crate::par;
use crate::types::{BlockRecord, Dtype, VariableDef};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub var: String,
    pub step: u64,
    /// Grid point of the first differing element, if one was located.
    pub index: Option<Vec<u64>>,
    pub expected: Option<f64>,
    pub got: Option<f64>,
    pub detail: String,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "var {} step {}", self.var, self.step)?;
        if let Some(i) = &self.index {
            write!(f, " index {i:?}")?;
        }
        if let (Some(e), Some(g)) = (self.expected, self.got) {
            write!(f, ": expected {e}, got {g}")?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum VerifyOutcome {
    Pass { steps: u64 },
    Fail(Mismatch),
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, VerifyOutcome::Pass { .. })
    }
}

fn structural(var: &str, step: u64, detail: impl Into<String>) -> VerifyOutcome {
    VerifyOutcome::Fail(Mismatch {
        var: var.into(),
        step,
        index: None,
        expected: None,
        got: None,
        detail: detail.into(),
    })
}

/// Index of the first differing element of two equal-length buffers.
fn first_diff(a: &[u8], b: &[u8], es: usize) -> Option<usize> {
    let n = a.len().min(b.len()) / es;
    par::find_first(n, |i| a[i * es..(i + 1) * es] != b[i * es..(i + 1) * es])
}

fn element_mismatch(
    def: &VariableDef,
    step: u64,
    start: &[u64],
    count: &[u64],
    i: usize,
    want: &[u8],
    got: &[u8],
) -> VerifyOutcome {
    let local = canonical_point(i as u64, count);
    let index = local.iter().zip(start).map(|(l, s)| l + s).collect();
    VerifyOutcome::Fail(Mismatch {
        var: def.name.clone(),
        step,
        index: Some(index),
        expected: Some(def.dtype.decode_value(want, i)),
        got: Some(def.dtype.decode_value(got, i)),
        detail: String::new(),
    })
}

fn check_defs(found: &[VariableDef], spec: &WorkloadSpec) -> Option<VerifyOutcome> {
    let want = spec.defs();
    if found == want.as_slice() {
        return None;
    }
    let name = found
        .iter()
        .zip(&want)
        .find(|(a, b)| a != b)
        .map_or_else(String::new, |(a, _)| a.name.clone());
    Some(structural(
        &name,
        0,
        format!("variables differ from the workload's {} {} arrays", want.len(), Dtype::name(spec.dtype)),
    ))
}

/// Recomputes every element of every step and compares bit for bit.
/// Accepts a container directory, a part-file directory, a flat file, or a
/// staging capture.
pub fn verify(path: &Path, spec: &WorkloadSpec) -> Result<VerifyOutcome> {
    if path.join(INFO_FILE).is_file() {
        return verify_container(path, spec);
    }
    if path.is_dir() {
        let tmp = path.with_extension("verify.cff");
        stitch(path, &tmp)?;
        let out = verify_flat(&tmp, spec);
        let _ = std::fs::remove_file(&tmp);
        return out;
    }
    verify_flat(path, spec)
}

fn verify_flat(path: &Path, spec: &WorkloadSpec) -> Result<VerifyOutcome> {
    let r = FlatReader::open(path)?;
    if let Some(f) = check_defs(r.defs(), spec) {
        return Ok(f);
    }
    let sidecar = capture_steps_path(path);
    let steps: Vec<u64> = if sidecar.is_file() {
        serde_json::from_slice(&std::fs::read(&sidecar)?)?
    } else {
        (0..r.steps()).collect()
    };
    if steps.len() as u64 != r.steps() {
        return Ok(structural("", 0, format!("{} steps listed, {} stored", steps.len(), r.steps())));
    }
    if !sidecar.is_file() && r.steps() != spec.steps {
        return Ok(structural("", r.steps(), format!("{} steps stored, {} expected", r.steps(), spec.steps)));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) || steps.last().is_some_and(|&s| s >= spec.steps) {
        return Ok(structural("", 0, format!("captured steps {steps:?} are not a subset of 0..{}", spec.steps)));
    }
    for (k, &step) in steps.iter().enumerate() {
        for (v, def) in r.defs().iter().enumerate() {
            let full = def.full_selection();
            let want = spec.fill(v as u32, step, &full);
            let got = r.read_var(&def.name, k as u64)?;
            if let Some(i) = first_diff(&want, &got, def.dtype.elem_size()) {
                return Ok(element_mismatch(def, step, &full.start, &full.count, i, &want, &got));
            }
        }
    }
    Ok(VerifyOutcome::Pass {
        steps: steps.len() as u64,
    })
}

fn verify_container(dir: &Path, spec: &WorkloadSpec) -> Result<VerifyOutcome> {
    let r = ContainerReader::open(dir)?;
    if let Some(f) = check_defs(r.defs(), spec) {
        return Ok(f);
    }
    if r.num_steps() as u64 != spec.steps {
        return Ok(structural(
            "",
            r.num_steps() as u64,
            format!("{} committed steps, {} expected", r.num_steps(), spec.steps),
        ));
    }
    for step in r.steps().collect::<Vec<_>>() {
        let idx = r.step_index(step).expect("listed step");
        for (v, def) in r.defs().iter().enumerate() {
            let es = def.dtype.elem_size();
            let blocks: Vec<&BlockRecord> = idx.blocks_for(&def.name).collect();
            let checked = par::map(&blocks, |b| check_block(&r, spec, v as u32, def, b, es));
            if let Some(fail) = checked.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().next() {
                return Ok(fail);
            }
            let mut cov = Coverage::new(&def.full_selection());
            for b in &blocks {
                cov.mark(&b.selection());
            }
            if let Some(gap) = cov.first_gap() {
                return Ok(VerifyOutcome::Fail(Mismatch {
                    var: def.name.clone(),
                    step,
                    index: Some(gap),
                    expected: None,
                    got: None,
                    detail: "no block covers this element".into(),
                }));
            }
        }
    }
    Ok(VerifyOutcome::Pass { steps: spec.steps })
}

fn check_block(
    r: &ContainerReader,
    spec: &WorkloadSpec,
    v: u32,
    def: &VariableDef,
    b: &BlockRecord,
    es: usize,
) -> Result<Option<VerifyOutcome>> {
    let fail = |detail: String| {
        Some(VerifyOutcome::Fail(Mismatch {
            var: def.name.clone(),
            step: b.step,
            index: Some(b.start.clone()),
            expected: None,
            got: None,
            detail,
        }))
    };
    let got = match r.decode_block(b, es) {
        Ok(g) => g,
        Err(e) => return Ok(fail(format!("block of rank {} does not decode: {e}", b.writer_rank))),
    };
    let want = spec.fill(v, b.step, &b.selection());
    if got.len() != want.len() {
        return Ok(fail(format!("block holds {} bytes, expected {}", got.len(), want.len())));
    }
    if let Some(i) = first_diff(&want, &got, es) {
        return Ok(Some(element_mismatch(def, b.step, &b.start, &b.count, i, &want, &got)));
    }
    if crc32c(&got) != b.checksum_raw {
        return Ok(fail("data matches but the recorded checksum does not".into()));
    }
    Ok(None)
}
