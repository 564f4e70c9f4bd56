//! The step-writer interface shared by every output mode.

use serde::{Deserialize, Serialize};

use crate::comm::Comm;
use crate::drain::{DrainStats, DrainWorker};
use crate::error::{Error, Result};
use crate::types::{EngineParams, Mode, Selection, VariableDef};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Time the caller spent blocked in put and end_step for this step.
    pub perceived_write_seconds: f64,
    /// Part of the above spent waiting for burst-buffer space.
    pub bb_wait_seconds: f64,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
    /// Set when a staging writer dropped the step.
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CloseMode {
    /// Wait for the background drain before returning.
    #[default]
    Wait,
    /// Return at once; the drain keeps running in the returned handle.
    Detach,
}

#[derive(Default)]
pub struct CloseSummary {
    pub steps: u64,
    pub close_seconds: f64,
    pub drain: Option<DrainStats>,
    pub detached: Option<DrainWorker>,
    /// Mode-specific counters, for example staging queue instrumentation.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub trait StepWriter {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()>;
    fn end_step(&mut self) -> Result<StepReport>;
    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary>;
}

/// Collective check that every rank declared the same variables.
pub(crate) fn check_defs(comm: &Comm, defs: &[VariableDef]) -> Result<()> {
    let mine = serde_json::to_vec(defs)?;
    let mismatch = comm.gather(&mine)?.and_then(|all| {
        all.iter()
            .position(|d| *d != mine)
            .map(|r| format!("rank {r} declares different variables than rank 0"))
    });
    match comm.agree(mismatch)? {
        Some(msg) => Err(Error::Open(msg)),
        None => Ok(()),
    }
}

/// Collective: runs `f`, then fails on every rank if it failed on any.
pub(crate) fn all_or_nothing<T>(comm: &Comm, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let res = f();
    let remote = comm.agree(res.as_ref().err().map(|e| e.to_string()))?;
    let v = res?;
    match remote {
        Some(msg) => Err(Error::Open(msg)),
        None => Ok(v),
    }
}

pub(crate) fn timeout_as_incomplete(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Timeout(m) => Error::IncompleteStep { step, detail: m },
        other => other,
    }
}

/// Checks a put against the session: step order, variable, selection and
/// byte count. Returns the variable's position in `defs`.
pub(crate) fn check_put(
    defs: &[VariableDef],
    session_step: u64,
    var: &str,
    step: u64,
    sel: &Selection,
    bytes: &[u8],
) -> Result<usize> {
    if step != session_step {
        return Err(Error::StepOrder {
            expected: session_step,
            got: step,
        });
    }
    let i = defs
        .iter()
        .position(|d| d.name == var)
        .ok_or_else(|| Error::Selection(format!("unknown variable {var:?}")))?;
    crate::layout::validate_selection(sel, &defs[i])?;
    let want = sel.num_elements() * defs[i].dtype.elem_size() as u64;
    if bytes.len() as u64 != want {
        return Err(Error::Shape(format!(
            "{var}: {} bytes for a selection of {want}",
            bytes.len()
        )));
    }
    Ok(i)
}

/// Collective: opens the writer for `params.mode`.
pub fn open_writer<'c>(
    comm: &'c Comm,
    params: &EngineParams,
    defs: &[VariableDef],
    name: &str,
) -> Result<Box<dyn StepWriter + 'c>> {
    use crate::container::ContainerWriter;
    use crate::modes::{FppWriter, FunnelWriter, TwoPhaseWriter};
    use crate::staging::StageWriter;
    Ok(match params.mode {
        Mode::SerialFunnel => Box::new(FunnelWriter::open(comm, params, defs, name)?),
        Mode::FilePerProcess => Box::new(FppWriter::open(comm, params, defs, name)?),
        Mode::SharedTwoPhase => Box::new(TwoPhaseWriter::open(comm, params, defs, name)?),
        Mode::AggregatedSubfile => Box::new(ContainerWriter::open(comm, params, defs, name)?),
        Mode::Staging => Box::new(StageWriter::open(comm, params, defs, name)?),
    })
}
