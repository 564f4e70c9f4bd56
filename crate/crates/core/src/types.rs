//! Domain types shared by every engine: variables, selections, index records
//! and engine configuration.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl Dtype {
    pub const fn elem_size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I32 => "i32",
            Dtype::I64 => "i64",
            Dtype::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            "i32" => Dtype::I32,
            "i64" => Dtype::I64,
            "u8" => Dtype::U8,
            other => return Err(Error::config(format!("unknown dtype {other:?}"))),
        })
    }

    /// Encodes one value as little-endian bytes of this type.
    pub fn encode_value(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            Dtype::I64 => out.extend_from_slice(&(v.round() as i64).to_le_bytes()),
            Dtype::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
        }
    }

    /// Decodes the element at `i` as f64.
    pub fn decode_value(self, bytes: &[u8], i: usize) -> f64 {
        let s = self.elem_size();
        let b = &bytes[i * s..(i + 1) * s];
        match self {
            Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            Dtype::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::I64 => i64::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::U8 => b[0] as f64,
        }
    }

    /// Single-pass min/max over a little-endian buffer. NaNs are skipped and
    /// infinities clamp to the finite range so the result survives JSON.
    pub fn min_max(self, bytes: &[u8]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut see = |v: f64| {
            if !v.is_nan() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        };
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .for_each(|c| see(f32::from_le_bytes(c.try_into().unwrap()) as f64)),
            _ => (0..bytes.len() / self.elem_size()).for_each(|i| see(self.decode_value(bytes, i))),
        }
        if lo > hi {
            return (0.0, 0.0);
        }
        (lo.clamp(f64::MIN, f64::MAX), hi.clamp(f64::MIN, f64::MAX))
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn is_true(b: &bool) -> bool {
    *b
}

fn default_true() -> bool {
    true
}

/// A named, typed, globally shaped array. Time is never a dimension here;
/// it is the step axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDef {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub step_varying: bool,
}

impl VariableDef {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            dtype,
            shape,
            step_varying: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("variable name must be non-empty"));
        }
        if self.shape.is_empty() || self.shape.len() > 4 {
            return Err(Error::config(format!(
                "variable {:?}: rank {} outside 1..=4",
                self.name,
                self.shape.len()
            )));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "variable {:?}: zero-length dimension",
                self.name
            )));
        }
        Ok(())
    }

    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> u64 {
        self.num_elements() * self.dtype.elem_size() as u64
    }

    pub fn full_selection(&self) -> Selection {
        Selection {
            start: vec![0; self.shape.len()],
            count: self.shape.clone(),
        }
    }
}

/// Validates a set of definitions as one session's declaration list.
pub fn validate_defs(defs: &[VariableDef]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for d in defs {
        d.validate()?;
        if !seen.insert(d.name.as_str()) {
            return Err(Error::config(format!("duplicate variable {:?}", d.name)));
        }
    }
    Ok(())
}

/// A hyper-rectangular box inside a variable's global shape.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub start: Vec<u64>,
    pub count: Vec<u64>,
}

impl Selection {
    pub fn new(start: Vec<u64>, count: Vec<u64>) -> Self {
        Self { start, count }
    }

    pub fn num_elements(&self) -> u64 {
        self.count.iter().product()
    }

    pub fn intersect(&self, other: &Selection) -> Option<Selection> {
        if self.start.len() != other.start.len() {
            return None;
        }
        let mut start = Vec::with_capacity(self.start.len());
        let mut count = Vec::with_capacity(self.start.len());
        for d in 0..self.start.len() {
            let lo = self.start[d].max(other.start[d]);
            let hi = (self.start[d] + self.count[d]).min(other.start[d] + other.count[d]);
            if hi <= lo {
                return None;
            }
            start.push(lo);
            count.push(hi - lo);
        }
        Some(Selection { start, count })
    }
}

/// Index entry locating one rank's block of one variable at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub var: String,
    pub step: u64,
    #[serde(rename = "rank")]
    pub writer_rank: u32,
    pub start: Vec<u64>,
    pub count: Vec<u64>,
    #[serde(rename = "subfile")]
    pub subfile_id: u32,
    pub offset: u64,
    #[serde(rename = "stored")]
    pub stored_nbytes: u64,
    #[serde(rename = "raw")]
    pub raw_nbytes: u64,
    pub codec: Codec,
    pub level: i32,
    pub shuffle: bool,
    #[serde(rename = "crc32c", with = "hex_u32")]
    pub checksum_raw: u32,
    #[serde(rename = "min")]
    pub stat_min: f64,
    #[serde(rename = "max")]
    pub stat_max: f64,
}

impl BlockRecord {
    pub fn selection(&self) -> Selection {
        Selection {
            start: self.start.clone(),
            count: self.count.clone(),
        }
    }

    pub fn codec_spec(&self) -> CodecSpec {
        CodecSpec {
            codec: self.codec,
            level: self.level,
            shuffle: self.shuffle,
        }
    }
}

mod hex_u32 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:08x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let s = <&str>::deserialize(d)?;
        if s.len() != 8 {
            return Err(de::Error::custom("crc32c must be 8 hex digits"));
        }
        u32::from_str_radix(s, 16).map_err(de::Error::custom)
    }
}

/// All block records of one step; the container's commit unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepIndex {
    pub step: u64,
    pub complete: bool,
    pub blocks: Vec<BlockRecord>,
}

impl StepIndex {
    pub fn new(step: u64) -> Self {
        Self {
            step,
            complete: false,
            blocks: Vec::new(),
        }
    }

    pub fn blocks_for<'a>(&'a self, var: &'a str) -> impl Iterator<Item = &'a BlockRecord> + 'a {
        self.blocks.iter().filter(move |b| b.var == var)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SerialFunnel,
    FilePerProcess,
    SharedTwoPhase,
    AggregatedSubfile,
    Staging,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SerialFunnel,
        Mode::FilePerProcess,
        Mode::SharedTwoPhase,
        Mode::AggregatedSubfile,
        Mode::Staging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SerialFunnel => "serial_funnel",
            Mode::FilePerProcess => "file_per_process",
            Mode::SharedTwoPhase => "shared_two_phase",
            Mode::AggregatedSubfile => "aggregated_subfile",
            Mode::Staging => "staging",
        }
    }

    /// The WRF backend this mode stands in for.
    pub fn io_form(self) -> &'static str {
        match self {
            Mode::SerialFunnel => "2",
            Mode::FilePerProcess => "102",
            Mode::SharedTwoPhase => "11",
            Mode::AggregatedSubfile => "ADIOS2",
            Mode::Staging => "SST",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.io_form().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueFullPolicy {
    #[default]
    Block,
    Discard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataplaneKind {
    #[default]
    Tcp,
    Shm,
}

impl DataplaneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tcp => "tcp",
            Self::Shm => "shm",
        }
    }
}

/// Simulated cluster shape. "Nodes" are labels over consecutive ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub world_size: u32,
    pub ranks_per_node: u32,
}

impl Topology {
    pub fn new(world_size: u32, ranks_per_node: u32) -> Result<Self> {
        if world_size == 0 || ranks_per_node == 0 {
            return Err(Error::config("world_size and ranks_per_node must be positive"));
        }
        if world_size % ranks_per_node != 0 {
            return Err(Error::config(format!(
                "world_size {world_size} not divisible by ranks_per_node {ranks_per_node}"
            )));
        }
        Ok(Self {
            world_size,
            ranks_per_node,
        })
    }

    pub fn num_nodes(&self) -> u32 {
        self.world_size / self.ranks_per_node
    }

    pub fn node_of(&self, rank: u32) -> u32 {
        rank / self.ranks_per_node
    }
}

/// Runtime engine configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub mode: Mode,
    /// Ranks per aggregator within a node; `None` means one aggregator per node.
    pub aggregation_ratio: Option<u32>,
    pub pfs_dir: PathBuf,
    pub bb_dir: Option<PathBuf>,
    pub drain: bool,
    /// Per-node burst buffer capacity; end_step waits for drain when exceeded.
    pub bb_capacity_mb: Option<f64>,
    pub codec: CodecSpec,
    pub queue_limit: u32,
    pub queue_full_policy: QueueFullPolicy,
    pub dataplane: DataplaneKind,
    pub pfs_bw_mbps: Option<f64>,
    /// Fixed service cost per PFS request; defaults to 2 ms when throttled.
    pub pfs_op_us: Option<u64>,
    pub comm_latency_us: Option<u64>,
    pub control_endpoint: Option<String>,
    pub step_timeout_ms: u64,
    pub min_readers: u32,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            mode: Mode::AggregatedSubfile,
            aggregation_ratio: None,
            pfs_dir: PathBuf::from("pfs"),
            bb_dir: None,
            drain: false,
            bb_capacity_mb: None,
            codec: CodecSpec::none(),
            queue_limit: 1,
            queue_full_policy: QueueFullPolicy::Block,
            dataplane: DataplaneKind::Tcp,
            pfs_bw_mbps: None,
            pfs_op_us: None,
            comm_latency_us: None,
            control_endpoint: None,
            step_timeout_ms: 30_000,
            min_readers: 1,
        }
    }
}

pub const DEFAULT_PFS_OP_US: u64 = 2000;

impl EngineParams {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.drain && self.bb_dir.is_none() {
            return Err(Error::config("drain=true requires bb_dir"));
        }
        if self.bb_dir.is_some() && !self.drain {
            return Err(Error::config(
                "bb_dir without drain leaves node-local sub-files only; enable drain",
            ));
        }
        if self.aggregation_ratio == Some(0) {
            return Err(Error::config("aggregation_ratio must be positive"));
        }
        if let Some(bw) = self.pfs_bw_mbps {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(Error::config("pfs_bw_mbps must be positive"));
            }
        }
        if let Some(cap) = self.bb_capacity_mb {
            if !(cap > 0.0) {
                return Err(Error::config("bb_capacity_mb must be positive"));
            }
        }
        match self.mode {
            Mode::SharedTwoPhase if self.codec.codec != Codec::None => Err(Error::config(
                "shared_two_phase does not support compression",
            )),
            Mode::SerialFunnel | Mode::FilePerProcess if self.codec.codec != Codec::None => {
                Err(Error::config(format!(
                    "{} writes raw canonical data; codec must be none",
                    self.mode
                )))
            }
            Mode::Staging if self.bb_dir.is_some() => {
                Err(Error::config("staging does not use a burst buffer"))
            }
            _ => Ok(()),
        }
    }

    pub fn ratio_for(&self, topo: &Topology) -> u32 {
        self.aggregation_ratio.unwrap_or(topo.ranks_per_node)
    }

    pub fn pfs_op_cost_us(&self) -> u64 {
        match (self.pfs_bw_mbps, self.pfs_op_us) {
            (_, Some(us)) => us,
            (Some(_), None) => DEFAULT_PFS_OP_US,
            (None, None) => 0,
        }
    }
}
