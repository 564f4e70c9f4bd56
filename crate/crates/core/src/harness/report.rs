use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const STEPS_CSV_HEADER: &str = "step,perceived_write_s,compute_s";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub perceived_write_s: f64,
    pub compute_s: f64,
    /// Slowest rank's put + end_step wall time, run-queue waits included.
    #[serde(default)]
    pub wall_write_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub wall_s: f64,
    pub init_s: f64,
    pub io_sum_s: f64,
    pub close_s: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRow>,
    pub totals: Totals,
    pub skipped_steps: Vec<u64>,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
    /// Output the run produced (container, flat file, part directory or
    /// staging capture).
    pub artifact: String,
    pub config: serde_json::Value,
    /// Rank 0's close counters.
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub failure: Option<String>,
}

impl RunReport {
    pub fn mean_perceived_s(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.totals.io_sum_s / self.steps.len() as f64
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("steps.csv"))?);
        writeln!(csv, "{STEPS_CSV_HEADER}")?;
        for s in &self.steps {
            writeln!(csv, "{},{},{}", s.step, s.perceived_write_s, s.compute_s)?;
        }
        csv.flush()?;
        Ok(())
    }
}
