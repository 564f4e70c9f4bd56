//! Coordinator and rank worker for one workload run.

use std::io::BufReader;
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::report::{RunReport, StepRow, Totals};
use super::WorkloadSpec;
use crate::comm::{tag, Comm, Rendezvous, DEFAULT_TIMEOUT};
use crate::engine::{open_writer, CloseMode, StepReport};
use crate::error::{Error, Result};
use crate::flatfile::FlatWriter;
use crate::frame::read_frame;
use crate::modes::{flat_name, fpp_dir_name};
use crate::staging::{contact_file, resolve_endpoint, ReaderOptions, StageReader};
use crate::types::{EngineParams, Mode};

/// File name of the staging reader's capture inside the run directory.
pub const CAPTURE_NAME: &str = "capture.cff";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub workload: WorkloadSpec,
    pub engine: EngineParams,
    /// Run directory for report.json, steps.csv and the staging capture.
    pub out: PathBuf,
    /// Output base name inside pfs_dir.
    pub name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec::default(),
            engine: EngineParams {
                pfs_dir: PathBuf::from("run/pfs"),
                ..Default::default()
            },
            out: PathBuf::from("run"),
            name: "wrfout".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.engine.validate()
    }

    /// Where the run's readable output lands.
    pub fn artifact(&self) -> PathBuf {
        let pfs = &self.engine.pfs_dir;
        match self.engine.mode {
            Mode::SerialFunnel | Mode::SharedTwoPhase => pfs.join(flat_name(&self.name)),
            Mode::FilePerProcess => pfs.join(fpp_dir_name(&self.name)),
            Mode::AggregatedSubfile => pfs.join(crate::container::container_dir_name(&self.name)),
            Mode::Staging => self.out.join(CAPTURE_NAME),
        }
    }
}

/// How rank workers are started.
#[derive(Clone, Debug)]
pub enum Launch {
    /// One OS process per rank running `<exe> rank-worker`.
    Processes(PathBuf),
    /// One thread per rank inside this process.
    Threads,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: u32,
    pub init_s: f64,
    pub steps: Vec<StepReport>,
    pub compute_s: Vec<f64>,
    /// Per step, time the rank spent runnable but waiting for a CPU while
    /// inside put/end_step.
    #[serde(default)]
    pub runqueue_s: Vec<f64>,
    pub close_s: f64,
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub error: Option<String>,
}

/// Body of one rank: join the world, write every step, report back.
pub fn run_rank(coordinator: SocketAddr, rank: u32, cfg: &RunConfig) -> Result<()> {
    let t0 = Instant::now();
    let spec = &cfg.workload;
    let latency = cfg.engine.comm_latency_us.map(Duration::from_micros);
    let comm = Comm::join(coordinator, rank, spec.topology()?, latency)?;
    let mut res = RankResult {
        rank,
        ..Default::default()
    };
    let outcome = (|| -> Result<()> {
        let defs = spec.defs();
        let mut w = open_writer(&comm, &cfg.engine, &defs, &cfg.name)?;
        res.init_s = t0.elapsed().as_secs_f64();
        let sel = spec.patch(rank)?;
        for step in 0..spec.steps {
            let tc = Instant::now();
            let data: Vec<Vec<u8>> = (0..spec.nvars).map(|v| spec.fill(v, step, &sel)).collect();
            thread::sleep(Duration::from_millis(spec.compute_ms));
            res.compute_s.push(tc.elapsed().as_secs_f64());
            // ranks enter the write phase together, as after a model timestep
            comm.barrier()?;
            let rq = run_delay();
            for (def, bytes) in defs.iter().zip(&data) {
                w.put(&def.name, step, &sel, bytes)?;
            }
            res.steps.push(w.end_step()?);
            let waited = match (rq, run_delay()) {
                (Some(a), Some(b)) => b.saturating_sub(a).as_secs_f64(),
                _ => 0.0,
            };
            res.runqueue_s.push(waited);
        }
        let summary = w.close(CloseMode::Wait)?;
        res.close_s = summary.close_seconds;
        res.extra = summary.extra;
        Ok(())
    })();
    if let Err(e) = &outcome {
        res.error = Some(e.to_string());
    }
    comm.send_to_coordinator(tag::REPORT, &serde_json::to_vec(&res)?)?;
    outcome
}

/// Cumulative run-queue delay of the calling thread (Linux schedstat).
pub fn run_delay() -> Option<Duration> {
    let s = std::fs::read_to_string("/proc/thread-self/schedstat").ok()?;
    let ns = s.split_whitespace().nth(1)?.parse().ok()?;
    Some(Duration::from_nanos(ns))
}

/// Staging consumer kept by the coordinator: reads every step in full and
/// appends it to a flat capture file, with the step numbers alongside.
fn capture(cfg: &RunConfig) -> Result<Vec<u64>> {
    let opts = ReaderOptions {
        timeout: DEFAULT_TIMEOUT,
        ..Default::default()
    };
    let mut r = match resolve_endpoint(cfg.engine.control_endpoint.as_deref()) {
        Some(ep) => StageReader::connect(&ep, opts)?,
        None => StageReader::connect_contact(&contact_file(&cfg.engine.pfs_dir, &cfg.name), opts)?,
    };
    let defs = r.defs().to_vec();
    let path = cfg.out.join(CAPTURE_NAME);
    let mut w = FlatWriter::create(&path, &defs)?;
    let mut steps = Vec::new();
    while let Some(idx) = r.begin_step()? {
        let step = idx.step;
        for d in &defs {
            w.write_var(&r.get_full(&d.name)?)?;
        }
        r.end_step()?;
        steps.push(step);
    }
    w.finish()?;
    std::fs::write(capture_steps_path(&path), serde_json::to_vec(&steps)?)?;
    Ok(steps)
}

pub(crate) fn capture_steps_path(capture: &Path) -> PathBuf {
    capture.with_extension("steps.json")
}

fn collect(link: TcpStream) -> Option<RankResult> {
    let mut r = BufReader::new(link);
    while let Ok(Some((t, p))) = read_frame(&mut r) {
        if t == tag::REPORT {
            return serde_json::from_slice(&p).ok();
        }
    }
    None
}

/// Runs the workload end to end and writes `<out>/report.json` and
/// `<out>/steps.csv`. A failing rank yields a report with `failure` set.
pub fn run(cfg: &RunConfig, launch: &Launch) -> Result<RunReport> {
    cfg.validate()?;
    let spec = &cfg.workload;
    let world = spec.ranks;
    let t0 = Instant::now();
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::create_dir_all(&cfg.engine.pfs_dir)?;

    let staging = cfg.engine.mode == Mode::Staging;
    if staging {
        let _ = std::fs::remove_file(contact_file(&cfg.engine.pfs_dir, &cfg.name));
    }
    let rv = Rendezvous::bind()?;
    let addr = rv.addr();
    let consumer = staging.then(|| {
        let c = cfg.clone();
        thread::spawn(move || capture(&c))
    });

    let mut children: Vec<Child> = Vec::new();
    let mut threads = Vec::new();
    match launch {
        Launch::Processes(exe) => {
            let cfg_path = cfg.out.join("run-config.json");
            std::fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?)?;
            for r in 0..world {
                let child = Command::new(exe)
                    .arg("rank-worker")
                    .arg("--coordinator")
                    .arg(addr.to_string())
                    .arg("--rank")
                    .arg(r.to_string())
                    .arg("--config")
                    .arg(&cfg_path)
                    .stdin(Stdio::null())
                    .spawn()
                    .map_err(|e| Error::Open(format!("spawn rank {r} ({}): {e}", exe.display())));
                match child {
                    Ok(c) => children.push(c),
                    Err(e) => {
                        for mut c in children {
                            let _ = c.kill();
                            let _ = c.wait();
                        }
                        return Err(e);
                    }
                }
            }
        }
        Launch::Threads => {
            for r in 0..world {
                let c = cfg.clone();
                threads.push(thread::spawn(move || run_rank(addr, r, &c)));
            }
        }
    }

    let links = match rv.exchange(world, DEFAULT_TIMEOUT) {
        Ok(l) => l,
        Err(e) => {
            for mut c in children {
                let _ = c.kill();
                let _ = c.wait();
            }
            return Err(e);
        }
    };
    let pending: Vec<_> = links
        .into_iter()
        .map(|l| thread::spawn(move || collect(l)))
        .collect();
    let results: Vec<Option<RankResult>> = pending
        .into_iter()
        .map(|h| h.join().unwrap_or(None))
        .collect();
    for c in &mut children {
        let _ = c.wait();
    }
    for t in threads {
        let _ = t.join();
    }
    let captured = consumer.map(|h| h.join().unwrap_or_else(|_| Err(Error::protocol("capture reader panicked"))));

    let mut failure = None;
    for (r, res) in results.iter().enumerate() {
        match res {
            None => {
                failure.get_or_insert_with(|| format!("rank {r} exited without a report"));
            }
            Some(RankResult { error: Some(e), .. }) => {
                failure.get_or_insert_with(|| format!("rank {r}: {e}"));
            }
            _ => {}
        }
    }
    if let Some(Err(e)) = &captured {
        failure.get_or_insert_with(|| format!("staging capture: {e}"));
    }

    let done: Vec<&RankResult> = results.iter().flatten().collect();
    let nsteps = done.iter().map(|r| r.steps.len()).min().unwrap_or(0);
    let mut report = RunReport {
        artifact: cfg.artifact().display().to_string(),
        config: serde_json::to_value(cfg)?,
        failure,
        ..Default::default()
    };
    for s in 0..nsteps {
        let wall = done
            .iter()
            .map(|r| r.steps[s].perceived_write_seconds)
            .fold(0.0, f64::max);
        let perceived = done
            .iter()
            .map(|r| {
                let rq = r.runqueue_s.get(s).copied().unwrap_or(0.0);
                (r.steps[s].perceived_write_seconds - rq).max(0.0)
            })
            .fold(0.0, f64::max);
        let compute = done
            .iter()
            .find(|r| r.rank == 0)
            .map_or(0.0, |r| r.compute_s[s]);
        report.steps.push(StepRow {
            step: s as u64,
            perceived_write_s: perceived,
            compute_s: compute,
            wall_write_s: wall,
        });
    }
    for r in &done {
        for s in &r.steps {
            report.raw_bytes += s.raw_bytes;
            report.stored_bytes += s.stored_bytes;
        }
        if r.rank == 0 {
            report.skipped_steps = r.steps.iter().filter(|s| s.skipped).map(|s| s.step).collect();
            report.extra = r.extra.clone();
        }
    }
    report.totals = Totals {
        wall_s: t0.elapsed().as_secs_f64(),
        init_s: done.iter().map(|r| r.init_s).fold(0.0, f64::max),
        io_sum_s: report.steps.iter().map(|s| s.perceived_write_s).sum(),
        close_s: done.iter().map(|r| r.close_s).fold(0.0, f64::max),
    };
    report.write(&cfg.out)?;
    Ok(report)
}
