//! Repeated runs over a matrix of configurations.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{run, Launch, RunConfig};
use crate::codec::{Codec, CodecSpec};
use crate::container::list_subfiles;
use crate::error::{Error, Result};
use crate::types::Mode;

pub const SWEEP_CSV_HEADER: &str =
    "label,mode,nodes,ranks,ratio,codec,shuffle,bb,subfiles,reps,mean_s,min_s,max_s,raw_bytes,stored_bytes";

/// One configuration of the matrix; unset fields keep the base config's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub mode: Mode,
    #[serde(default)]
    pub nodes: Option<u32>,
    #[serde(default)]
    pub ratio: Option<u32>,
    #[serde(default)]
    pub codec: Option<CodecSpec>,
    #[serde(default)]
    pub bb: bool,
    /// Per-node burst-buffer capacity for this cell.
    #[serde(default)]
    pub bb_capacity_mb: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub mode: String,
    pub nodes: u32,
    pub ranks: u32,
    pub ratio: u32,
    pub codec: String,
    pub shuffle: bool,
    pub bb: bool,
    pub subfiles: Option<usize>,
    pub reps: u32,
    /// Per-repetition mean perceived write time per step.
    pub samples: Vec<f64>,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.label,
            self.mode,
            self.nodes,
            self.ranks,
            self.ratio,
            self.codec,
            self.shuffle,
            self.bb,
            self.subfiles.map_or(String::new(), |s| s.to_string()),
            self.reps,
            self.mean_s,
            self.min_s,
            self.max_s,
            self.raw_bytes,
            self.stored_bytes
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Relative gaps between consecutive rows, when the rows should get
    /// strictly faster in order.
    pub gaps: Vec<f64>,
    pub strictly_decreasing: bool,
}

/// Relative gaps `(a - b) / a` between consecutive means and whether each
/// is at least `min_gap`.
pub fn table_one_order(means: &[f64], min_gap: f64) -> (Vec<f64>, bool) {
    let gaps: Vec<f64> = means.windows(2).map(|w| (w[0] - w[1]) / w[0]).collect();
    let ok = gaps.iter().all(|&g| g >= min_gap);
    (gaps, ok)
}

/// Runs every cell `reps` times under `out/<label>/rep<k>` and writes
/// `out/sweep.csv` and `out/sweep.json`.
pub fn bench_sweep(
    base: &RunConfig,
    cells: &[Cell],
    reps: u32,
    launch: &Launch,
    out: &Path,
    min_gap: f64,
) -> Result<SweepReport> {
    if reps == 0 {
        return Err(Error::config("repetitions must be positive"));
    }
    let mut report = SweepReport::default();
    for cell in cells {
        let mut cfg = base.clone();
        let dir = out.join(&cell.label);
        cfg.engine.mode = cell.mode;
        if let Some(n) = cell.nodes {
            cfg.workload.ranks = n * cfg.workload.ranks_per_node;
        }
        if cell.ratio.is_some() {
            cfg.engine.aggregation_ratio = cell.ratio;
        }
        if let Some(c) = cell.codec {
            cfg.engine.codec = c;
        }
        cfg.engine.pfs_dir = dir.join("pfs");
        if cell.bb {
            cfg.engine.bb_dir = Some(dir.join("bb"));
            cfg.engine.drain = true;
            if cell.bb_capacity_mb.is_some() {
                cfg.engine.bb_capacity_mb = cell.bb_capacity_mb;
            }
        } else {
            cfg.engine.bb_dir = None;
            cfg.engine.drain = false;
        }
        let topo = cfg.workload.topology()?;
        let mut row = SweepRow {
            label: cell.label.clone(),
            mode: cell.mode.to_string(),
            nodes: topo.num_nodes(),
            ranks: topo.world_size,
            ratio: cfg.engine.ratio_for(&topo),
            codec: cfg.engine.codec.codec.to_string(),
            shuffle: cfg.engine.codec.shuffle,
            bb: cell.bb,
            reps,
            ..Default::default()
        };
        for k in 0..reps {
            cfg.out = dir.join(format!("rep{k}"));
            let r = run(&cfg, launch)?;
            if let Some(f) = r.failure {
                return Err(Error::RankFailure(format!("{} repetition {k}: {f}", cell.label)));
            }
            row.samples.push(r.mean_perceived_s());
            row.raw_bytes = r.raw_bytes;
            row.stored_bytes = r.stored_bytes;
            log::info!("{} rep {k}: {:.4} s/step", cell.label, r.mean_perceived_s());
        }
        if cell.mode == Mode::AggregatedSubfile {
            row.subfiles = Some(list_subfiles(&cfg.artifact())?.len());
        }
        row.mean_s = row.samples.iter().sum::<f64>() / reps as f64;
        row.min_s = row.samples.iter().copied().fold(f64::INFINITY, f64::min);
        row.max_s = row.samples.iter().copied().fold(0.0, f64::max);
        report.rows.push(row);
    }
    let means: Vec<f64> = report.rows.iter().map(|r| r.mean_s).collect();
    (report.gaps, report.strictly_decreasing) = table_one_order(&means, min_gap);

    std::fs::create_dir_all(out)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("sweep.csv"))?);
    writeln!(csv, "{SWEEP_CSV_HEADER}")?;
    for r in &report.rows {
        writeln!(csv, "{}", r.csv())?;
    }
    csv.flush()?;
    std::fs::write(out.join("sweep.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Named cell lists: table-one, ratio, codec, burst-buffer or modes.
pub fn preset(name: &str, cfg: &RunConfig) -> Result<Vec<Cell>> {
    let cell = |label: &str, mode: Mode| Cell {
        label: label.into(),
        mode,
        nodes: None,
        ratio: None,
        codec: None,
        bb: false,
        bb_capacity_mb: None,
    };
    // one uncompressed step per node unless configured
    let nodes = cfg.workload.topology()?.num_nodes();
    let step_mb = cfg.workload.raw_bytes_per_step() as f64 / nodes as f64 / 1e6;
    let capacity = Some(cfg.engine.bb_capacity_mb.unwrap_or(step_mb));
    let shuffle = cfg.engine.codec.shuffle;
    let cells = match name {
        "table-one" => vec![
            cell("shared_two_phase", Mode::SharedTwoPhase),
            cell("aggregated", Mode::AggregatedSubfile),
            Cell {
                bb: true,
                bb_capacity_mb: capacity,
                ..cell("aggregated_bb", Mode::AggregatedSubfile)
            },
            Cell {
                bb: true,
                bb_capacity_mb: capacity,
                codec: Some(CodecSpec::with_default_level(Codec::Zstd, true)),
                ..cell("aggregated_bb_zstd", Mode::AggregatedSubfile)
            },
        ],
        "ratio" => {
            let mut ratios = vec![1, 2, cfg.workload.ranks_per_node];
            ratios.dedup();
            ratios
                .into_iter()
                .map(|r| Cell {
                    ratio: Some(r),
                    ..cell(&format!("ratio_{r}"), Mode::AggregatedSubfile)
                })
                .collect()
        }
        "codec" => Codec::ALL
            .into_iter()
            .map(|c| Cell {
                codec: Some(CodecSpec::with_default_level(c, shuffle && c != Codec::None)),
                ..cell(&format!("codec_{c}"), Mode::AggregatedSubfile)
            })
            .collect(),
        "burst-buffer" => vec![
            cell("pfs_only", Mode::AggregatedSubfile),
            Cell {
                bb: true,
                ..cell("burst_buffer", Mode::AggregatedSubfile)
            },
        ],
        "modes" => Mode::ALL
            .into_iter()
            .map(|m| Cell {
                codec: Some(CodecSpec::none()),
                ..cell(m.name(), m)
            })
            .collect(),
        other => return Err(Error::config(format!("unknown preset {other:?}"))),
    };
    Ok(cells)
}
