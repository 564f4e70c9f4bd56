//! Aggregated sub-file container: `<name>.mbp/{info.json, index.jsonl, data.K}`.
//!
//! Sub-files hold payload bodies only. Every piece of framing lives in the
//! index, and a newline-terminated index line is the commit point of a step.

mod reader;
mod writer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::types::{Mode, VariableDef};

pub use reader::{consolidate, ConsolidateReport, ContainerReader};
pub use writer::ContainerWriter;

pub const INFO_FILE: &str = "info.json";
pub const INDEX_FILE: &str = "index.jsonl";
pub const FORMAT_VERSION: u32 = 1;

pub fn data_file(subfile: u32) -> String {
    format!("data.{subfile}")
}

pub(crate) fn progress_file(subfile: u32) -> String {
    format!(".drain.{subfile}")
}

/// `name` with the `.mbp` suffix added when missing.
pub fn container_dir_name(name: &str) -> String {
    if name.ends_with(".mbp") {
        name.to_string()
    } else {
        format!("{name}.mbp")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatorMap {
    pub world_size: u32,
    pub ranks_per_node: u32,
    pub aggregation_ratio: u32,
    /// rank -> (aggregator rank, subfile id)
    pub assignment: Vec<(u32, u32)>,
}

/// Splits each node into groups of `ratio` consecutive ranks; the last group
/// of a node is cut short at the node boundary.
pub fn aggregator_map(world_size: u32, ranks_per_node: u32, ratio: u32) -> Result<AggregatorMap> {
    if world_size == 0 || ranks_per_node == 0 || world_size % ranks_per_node != 0 {
        return Err(Error::config(format!(
            "world size {world_size} not divisible by ranks per node {ranks_per_node}"
        )));
    }
    if ratio == 0 || ratio > ranks_per_node {
        return Err(Error::config(format!(
            "aggregation ratio {ratio} outside 1..={ranks_per_node}"
        )));
    }
    let mut assignment = Vec::with_capacity(world_size as usize);
    let mut subfile = 0u32;
    for node in 0..world_size / ranks_per_node {
        let base = node * ranks_per_node;
        let mut g = 0;
        while g < ranks_per_node {
            let agg = base + g;
            for _ in g..(g + ratio).min(ranks_per_node) {
                assignment.push((agg, subfile));
            }
            g += ratio;
            subfile += 1;
        }
    }
    Ok(AggregatorMap {
        world_size,
        ranks_per_node,
        aggregation_ratio: ratio,
        assignment,
    })
}

impl AggregatorMap {
    pub fn num_subfiles(&self) -> u32 {
        self.assignment.last().map_or(0, |a| a.1 + 1)
    }

    pub fn aggregator_of(&self, rank: u32) -> u32 {
        self.assignment[rank as usize].0
    }

    pub fn subfile_of(&self, rank: u32) -> u32 {
        self.assignment[rank as usize].1
    }

    pub fn is_aggregator(&self, rank: u32) -> bool {
        self.aggregator_of(rank) == rank
    }

    /// Aggregator ranks in subfile order.
    pub fn aggregators(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.assignment.iter().map(|a| a.0).collect();
        v.dedup();
        v
    }

    /// Ranks served by `aggregator`, itself included.
    pub fn members(&self, aggregator: u32) -> Vec<u32> {
        (0..self.world_size)
            .filter(|&r| self.aggregator_of(r) == aggregator)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoParams {
    pub codec: Codec,
    pub level: i32,
    pub shuffle: bool,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub format_version: u32,
    pub created_unix_ms: u64,
    pub world_size: u32,
    pub ranks_per_node: u32,
    pub aggregation_ratio: u32,
    pub variables: Vec<VariableDef>,
    pub params: InfoParams,
}

impl ContainerInfo {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INFO_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Open(format!("{}: {e}", path.display())))?;
        let info: ContainerInfo = serde_json::from_slice(&bytes)?;
        if info.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format_version {}",
                info.format_version
            )));
        }
        Ok(info)
    }

    pub fn aggregator_map(&self) -> Result<AggregatorMap> {
        aggregator_map(self.world_size, self.ranks_per_node, self.aggregation_ratio)
    }
}

/// Lists `data.K` files in a container directory, sorted by K.
pub fn list_subfiles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<(u32, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("data.")?.parse().ok()?;
            Some((k, e.path()))
        })
        .collect();
    v.sort();
    Ok(v.into_iter().map(|(_, p)| p).collect())
}
