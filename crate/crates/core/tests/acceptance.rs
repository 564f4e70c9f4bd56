//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Any argument not starting with
//! `-` filters criteria by substring.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use miniio::codec::{Codec, CodecSpec};
use miniio::comm::run_ranks;
use miniio::container::{consolidate, list_subfiles, INDEX_FILE};
use miniio::engine::CloseMode;
use miniio::flatfile;
use miniio::harness::{
    bench_sweep, field_value, preset, run, verify, Cell, Launch, RunConfig, SweepReport,
    WorkloadSpec,
};
use miniio::modes::stitch;
use miniio::staging::{contact_file, ReaderOptions, StageReader, StageWriter};
use miniio::types::{DataplaneKind, EngineParams, Mode, QueueFullPolicy};

type Check = fn(&Path) -> Result<String, String>;

fn exe() -> Launch {
    Launch::Processes(PathBuf::from(env!("CARGO_BIN_EXE_miniio")))
}

fn config(dir: &Path, grid: [u64; 3], ranks: u32, rpn: u32, steps: u64) -> RunConfig {
    RunConfig {
        workload: WorkloadSpec {
            global_shape: grid,
            ranks,
            ranks_per_node: rpn,
            steps,
            ..Default::default()
        },
        engine: EngineParams {
            pfs_dir: dir.join("pfs"),
            ..Default::default()
        },
        out: dir.join("run"),
        name: "wrfout".into(),
    }
}

fn throttled(mut cfg: RunConfig) -> RunConfig {
    cfg.engine.pfs_bw_mbps = Some(100.0);
    cfg.engine.comm_latency_us = Some(200);
    cfg
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn means(r: &SweepReport) -> String {
    r.rows
        .iter()
        .map(|row| format!("{} {:.4}", row.label, row.mean_s))
        .collect::<Vec<_>>()
        .join(", ")
}

fn sweep(base: &RunConfig, cells: &[Cell], reps: u32, out: &Path) -> Result<SweepReport, String> {
    bench_sweep(base, cells, reps, &exe(), out, 0.15).map_err(|e| e.to_string())
}

fn round_trip(dir: &Path) -> Result<String, String> {
    let t0 = Instant::now();
    let (mut ran, mut skipped) = (0, 0);
    for mode in Mode::ALL {
        for codec in Codec::ALL {
            for shuffle in [false, true] {
                for bb in [false, true] {
                    let label = format!("{mode}-{codec}-{shuffle}-{bb}");
                    let d = dir.join(&label);
                    let mut cfg = config(&d, [64, 48, 8], 4, 2, 3);
                    cfg.engine.mode = mode;
                    cfg.engine.codec = CodecSpec::with_default_level(codec, shuffle);
                    if bb {
                        cfg.engine.bb_dir = Some(d.join("bb"));
                        cfg.engine.drain = true;
                    }
                    if cfg.validate().is_err() {
                        skipped += 1;
                        continue;
                    }
                    let r = run(&cfg, &exe()).map_err(|e| format!("{label}: {e}"))?;
                    if let Some(f) = r.failure {
                        return Err(format!("{label}: {f}"));
                    }
                    let v = verify(&cfg.artifact(), &cfg.workload).map_err(|e| format!("{label}: {e}"))?;
                    ensure(v.passed(), || format!("{label}: {v:?}"))?;
                    ran += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("{ran} combinations took {secs:.1} s"))?;
    Ok(format!("{ran} combinations verified, {skipped} rejected by config, {secs:.1} s"))
}

/// Canonical flat file built point by point from the field function.
fn canonical_oracle(spec: &WorkloadSpec) -> Vec<u8> {
    let defs = spec.defs();
    let [nx, ny, nz] = spec.global_shape;
    let mut out = flatfile::header_bytes(&defs, spec.steps);
    for t in 0..spec.steps {
        for v in 0..spec.nvars {
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let f = field_value(v, x, y, z, t, spec.seed, spec.noise);
                        out.extend((f as f32).to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

fn oracle_equivalence(dir: &Path) -> Result<String, String> {
    let t0 = Instant::now();
    let mut got = Vec::new();
    for mode in [Mode::AggregatedSubfile, Mode::FilePerProcess, Mode::SharedTwoPhase, Mode::SerialFunnel] {
        let d = dir.join(mode.name());
        let mut cfg = config(&d, [16, 16, 4], 4, 2, 3);
        cfg.engine.mode = mode;
        let r = run(&cfg, &exe()).map_err(|e| e.to_string())?;
        if let Some(f) = r.failure {
            return Err(format!("{mode}: {f}"));
        }
        let flat = d.join("flat.cff");
        match mode {
            Mode::AggregatedSubfile => consolidate(&cfg.artifact(), &flat).map(|_| ()),
            Mode::FilePerProcess => stitch(&cfg.artifact(), &flat).map(|_| ()),
            _ => std::fs::copy(cfg.artifact(), &flat).map(|_| ()).map_err(Into::into),
        }
        .map_err(|e| format!("{mode}: {e}"))?;
        got.push((mode, std::fs::read(flat).map_err(|e| e.to_string())?, cfg.workload));
    }
    let want = canonical_oracle(&got[0].2);
    for (mode, bytes, _) in &got {
        ensure(bytes == &want, || format!("{mode} output differs from the oracle"))?;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("consolidate, stitch, two-phase, funnel all equal the oracle ({} bytes, {secs:.1} s)", want.len()))
}

fn table_one(dir: &Path) -> Result<String, String> {
    let t0 = Instant::now();
    let base = throttled(config(dir, [128, 96, 16], 16, 8, 8));
    let cells = preset("table-one", &base).map_err(|e| e.to_string())?;
    let r = sweep(&base, &cells, 5, dir)?;
    let secs = t0.elapsed().as_secs_f64();
    let gaps: Vec<String> = r.gaps.iter().map(|g| format!("{:.0}%", g * 100.0)).collect();
    let detail = format!("{} | gaps {} | {secs:.0} s", means(&r), gaps.join(" "));
    ensure(r.strictly_decreasing && secs < 300.0, || detail.clone())?;
    Ok(detail)
}

fn ratio_law(dir: &Path) -> Result<String, String> {
    let base = throttled(config(dir, [128, 96, 16], 16, 8, 4));
    let cells = preset("ratio", &base).map_err(|e| e.to_string())?;
    let r = sweep(&base, &cells, 3, dir)?;
    let counts: Vec<(u32, Option<usize>)> = r.rows.iter().map(|row| (row.ratio, row.subfiles)).collect();
    ensure(counts == vec![(1, Some(16)), (2, Some(8)), (8, Some(2))], || {
        format!("subfile counts {counts:?}")
    })?;
    let (first, last) = (&r.rows[0], &r.rows[r.rows.len() - 1]);
    let detail = format!("subfiles 16/8/2 | {}", means(&r));
    ensure(first.mean_s >= last.mean_s, || detail.clone())?;
    Ok(detail)
}

fn same_container(a: &Path, b: &Path) -> Result<bool, String> {
    let files = |d: &Path| -> Result<Vec<PathBuf>, String> {
        let mut f = list_subfiles(d).map_err(|e| e.to_string())?;
        f.push(d.join(INDEX_FILE));
        Ok(f)
    };
    let (fa, fb) = (files(a)?, files(b)?);
    if fa.len() != fb.len() {
        return Ok(false);
    }
    for (x, y) in fa.iter().zip(&fb) {
        if std::fs::read(x).map_err(|e| e.to_string())? != std::fs::read(y).map_err(|e| e.to_string())? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn burst_buffer(dir: &Path) -> Result<String, String> {
    let mut parts = Vec::new();
    for rpn in [8, 4] {
        let d = dir.join(format!("rpn{rpn}"));
        let base = throttled(config(&d, [256, 192, 16], 16, rpn, 4));
        let cells = preset("burst-buffer", &base).map_err(|e| e.to_string())?;
        let r = sweep(&base, &cells, 3, &d)?;
        let (pfs, bb) = (r.rows[0].mean_s, r.rows[1].mean_s);
        let nodes = r.rows[0].nodes;
        let line = format!("{nodes} nodes: bb/pfs {:.2}", bb / pfs);
        ensure(bb <= pfs / 3.0, || line.clone())?;
        let name = miniio::container::container_dir_name("wrfout");
        let same = same_container(&d.join("pfs_only/pfs").join(&name), &d.join("burst_buffer/pfs").join(&name))?;
        ensure(same, || format!("{nodes} nodes: drained container differs from direct write"))?;
        parts.push(line);
    }
    Ok(format!("{} | drained containers byte-identical", parts.join(", ")))
}

fn compression(dir: &Path) -> Result<String, String> {
    let base = throttled(config(dir, [128, 96, 16], 16, 8, 4));
    let cells: Vec<Cell> = Codec::ALL
        .into_iter()
        .map(|c| Cell {
            label: c.to_string(),
            mode: Mode::AggregatedSubfile,
            nodes: None,
            ratio: None,
            codec: Some(CodecSpec::with_default_level(c, c != Codec::None)),
            bb: false,
            bb_capacity_mb: None,
        })
        .collect();
    let r = sweep(&base, &cells, 3, dir)?;
    let row = |c: Codec| r.rows.iter().find(|row| row.label == c.to_string()).unwrap();
    let none = row(Codec::None);
    for c in [Codec::Lz4, Codec::Zstd, Codec::Zlib] {
        ensure(row(c).stored_bytes < none.stored_bytes, || format!("{c} stored {} bytes", row(c).stored_bytes))?;
    }
    let zstd = row(Codec::Zstd);
    let ratio = zstd.raw_bytes as f64 / zstd.stored_bytes as f64;
    let detail = format!(
        "zstd+shuffle ratio {ratio:.2} | stored < raw for all codecs | write {:.4} s vs none {:.4} s",
        zstd.mean_s, none.mean_s
    );
    ensure(ratio > 2.0 && zstd.mean_s < none.mean_s, || detail.clone())?;
    Ok(detail)
}

/// Steps through a staging session with a consumer that holds each step for
/// `hold`; returns per-step perceived write times and the max-unreleased
/// counter.
fn staged(dir: &Path, queue_limit: u32, hold: Duration) -> Result<(Vec<f64>, u64), String> {
    let spec = WorkloadSpec {
        global_shape: [32, 32, 8],
        ranks: 2,
        ranks_per_node: 2,
        steps: 6,
        ..Default::default()
    };
    let params = EngineParams {
        mode: Mode::Staging,
        pfs_dir: dir.to_path_buf(),
        queue_limit,
        queue_full_policy: QueueFullPolicy::Block,
        step_timeout_ms: 10_000,
        ..Default::default()
    };
    let cf = contact_file(dir, "q");
    let reader = thread::spawn(move || -> miniio::Result<usize> {
        let opts = ReaderOptions {
            timeout: Duration::from_secs(30),
            ..Default::default()
        };
        let mut r = StageReader::connect_contact(&cf, opts)?;
        let mut n = 0;
        while r.begin_step()?.is_some() {
            r.get_full("T")?;
            thread::sleep(hold);
            r.end_step()?;
            n += 1;
        }
        Ok(n)
    });
    let s = spec.clone();
    let out = run_ranks(spec.topology().unwrap(), None, move |comm| {
        let defs = s.defs();
        let sel = s.patch(comm.rank())?;
        let mut w = StageWriter::open(&comm, &params, &defs, "q")?;
        let mut times = Vec::new();
        for step in 0..s.steps {
            let data: Vec<Vec<u8>> = (0..s.nvars).map(|v| s.fill(v, step, &sel)).collect();
            let t = Instant::now();
            for (d, b) in defs.iter().zip(&data) {
                w.put(&d.name, step, &sel, b)?;
            }
            w.end_step()?;
            times.push(t.elapsed().as_secs_f64());
        }
        let stats = w.stats();
        w.close(CloseMode::Wait)?;
        Ok((times, stats.max_unreleased as u64))
    })
    .map_err(|e| e.to_string())?;
    let seen = reader.join().map_err(|_| "reader panicked".to_string())?.map_err(|e| e.to_string())?;
    ensure(seen == 6, || format!("reader saw {seen} of 6 steps"))?;
    Ok(out.into_iter().next().unwrap())
}

fn queue_limit(dir: &Path) -> Result<String, String> {
    let hold = Duration::from_millis(100);
    let h = hold.as_secs_f64();
    let (sync, k1) = staged(&dir.join("q1"), 1, hold)?;
    let stalled = sync[1..].iter().copied().fold(f64::INFINITY, f64::min);
    ensure(stalled >= h - 0.010, || format!("queue_limit=1 step stalled only {stalled:.3} s"))?;
    ensure(k1 <= 1, || format!("queue_limit=1 held {k1} unreleased steps"))?;
    let (_, k2) = staged(&dir.join("q2"), 2, hold)?;
    ensure(k2 <= 2, || format!("queue_limit=2 held {k2} unreleased steps"))?;
    let (asyncr, _) = staged(&dir.join("q0"), 0, hold)?;
    let worst = asyncr.iter().copied().fold(0.0, f64::max);
    ensure(worst < 0.010, || format!("queue_limit=0 end_step took {worst:.4} s"))?;
    Ok(format!(
        "limit 1 stalls >= {stalled:.3} s for a {h:.3} s hold, limit 0 worst {:.1} ms, max unreleased {k1}/{k2} for k=1/2",
        worst * 1e3
    ))
}

fn transport(dir: &Path) -> Result<String, String> {
    let mut outputs = Vec::new();
    for (label, mode, kind) in [
        ("container", Mode::AggregatedSubfile, DataplaneKind::Tcp),
        ("staging-tcp", Mode::Staging, DataplaneKind::Tcp),
        ("staging-shm", Mode::Staging, DataplaneKind::Shm),
    ] {
        let d = dir.join(label);
        let mut cfg = config(&d, [64, 48, 8], 4, 2, 3);
        cfg.engine.mode = mode;
        cfg.engine.dataplane = kind;
        if mode == Mode::AggregatedSubfile {
            cfg.engine.codec = CodecSpec::with_default_level(Codec::Zstd, true);
        }
        let r = run(&cfg, &exe()).map_err(|e| e.to_string())?;
        if let Some(f) = r.failure {
            return Err(format!("{label}: {f}"));
        }
        let flat = if mode == Mode::AggregatedSubfile {
            let f = d.join("flat.cff");
            consolidate(&cfg.artifact(), &f).map_err(|e| e.to_string())?;
            f
        } else {
            cfg.artifact()
        };
        outputs.push((label, std::fs::read(flat).map_err(|e| e.to_string())?));
    }
    for (label, bytes) in &outputs[1..] {
        ensure(bytes == &outputs[0].1, || format!("{label} differs from container"))?;
    }
    Ok(format!("container, staging/tcp and staging/shm identical ({} bytes)", outputs[0].1.len()))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Check); 8] = [
        ("round_trip", round_trip),
        ("oracle_equivalence", oracle_equivalence),
        ("table_one_trend", table_one),
        ("aggregator_ratio_law", ratio_law),
        ("burst_buffer_scaling", burst_buffer),
        ("compression", compression),
        ("queue_limit", queue_limit),
        ("transport_transparency", transport),
    ];
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let dir = root.path().join(name);
        std::fs::create_dir_all(&dir).expect("criterion dir");
        let outcome = std::panic::catch_unwind(|| check(&dir))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
