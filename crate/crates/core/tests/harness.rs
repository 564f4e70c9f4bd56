use std::path::{Path, PathBuf};

use miniio::container::{consolidate, data_file, INDEX_FILE};
use miniio::harness::{
    bench_sweep, preset, run, verify, Launch, RunConfig, VerifyOutcome, WorkloadSpec,
};
use miniio::index::index_parse;
use miniio::modes::stitch;
use miniio::types::{DataplaneKind, EngineParams, Mode};

fn exe() -> Launch {
    Launch::Processes(PathBuf::from(env!("CARGO_BIN_EXE_miniio")))
}

fn small(dir: &Path, mode: Mode) -> RunConfig {
    RunConfig {
        workload: WorkloadSpec {
            global_shape: [16, 16, 4],
            ranks: 4,
            ranks_per_node: 2,
            steps: 3,
            ..Default::default()
        },
        engine: EngineParams {
            mode,
            pfs_dir: dir.join("pfs"),
            ..Default::default()
        },
        out: dir.join("run"),
        name: "wrfout".into(),
    }
}

fn run_ok(cfg: &RunConfig, launch: &Launch) -> miniio::harness::RunReport {
    let r = run(cfg, launch).unwrap();
    assert_eq!(r.failure, None);
    r
}

#[test]
fn aggregated_run_writes_one_index_line_per_step() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small(t.path(), Mode::AggregatedSubfile);
    let r = run_ok(&cfg, &exe());
    assert_eq!(r.steps.len(), 3);
    let index = std::fs::read_to_string(cfg.artifact().join(INDEX_FILE)).unwrap();
    assert_eq!(index.lines().count(), 3);
    assert!(verify(&cfg.artifact(), &cfg.workload).unwrap().passed());
}

#[test]
fn funnel_output_equals_consolidated_container() {
    let t = tempfile::tempdir().unwrap();
    let a = small(&t.path().join("a"), Mode::AggregatedSubfile);
    let f = small(&t.path().join("f"), Mode::SerialFunnel);
    run_ok(&a, &Launch::Threads);
    run_ok(&f, &Launch::Threads);
    let flat = t.path().join("c.cff");
    consolidate(&a.artifact(), &flat).unwrap();
    assert_eq!(std::fs::read(flat).unwrap(), std::fs::read(f.artifact()).unwrap());
}

#[test]
fn file_per_process_stitches_and_verifies() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small(t.path(), Mode::FilePerProcess);
    run_ok(&cfg, &Launch::Threads);
    let parts = std::fs::read_dir(cfg.artifact())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("part."))
        .count();
    assert_eq!(parts, 4);
    let out = t.path().join("stitched.cff");
    let s = stitch(&cfg.artifact(), &out).unwrap();
    assert_eq!(s.parts, 4);
    assert!(verify(&out, &cfg.workload).unwrap().passed());
}

#[test]
fn flipped_byte_is_located() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small(t.path(), Mode::AggregatedSubfile);
    run_ok(&cfg, &Launch::Threads);
    let index = std::fs::read_to_string(cfg.artifact().join(INDEX_FILE)).unwrap();
    let step1 = index_parse(index.lines().nth(1).unwrap()).unwrap();
    let b = step1.blocks.iter().find(|b| b.subfile_id == 0).unwrap().clone();

    // element 5 of the block, z fastest
    let local = 5u64;
    let (cy, cz) = (b.count[1], b.count[2]);
    let want = vec![
        b.start[0] + local / (cy * cz),
        b.start[1] + local / cz % cy,
        b.start[2] + local % cz,
    ];
    let data = cfg.artifact().join(data_file(0));
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[(b.offset + local * 4 + 1) as usize] ^= 0x10;
    std::fs::write(&data, bytes).unwrap();

    match verify(&cfg.artifact(), &cfg.workload).unwrap() {
        VerifyOutcome::Fail(m) => {
            assert_eq!(m.var, b.var);
            assert_eq!(m.step, 1);
            assert_eq!(m.index, Some(want));
        }
        VerifyOutcome::Pass { .. } => panic!("tampered container verified"),
    }
}

#[test]
fn equal_seeds_give_identical_containers() {
    let t = tempfile::tempdir().unwrap();
    let a = small(&t.path().join("a"), Mode::AggregatedSubfile);
    let b = small(&t.path().join("b"), Mode::AggregatedSubfile);
    run_ok(&a, &Launch::Threads);
    run_ok(&b, &Launch::Threads);
    for f in [data_file(0), data_file(1), INDEX_FILE.to_string()] {
        assert_eq!(
            std::fs::read(a.artifact().join(&f)).unwrap(),
            std::fs::read(b.artifact().join(&f)).unwrap(),
            "{f}"
        );
    }
    let mut c = small(&t.path().join("c"), Mode::AggregatedSubfile);
    c.workload.seed = 2;
    run_ok(&c, &Launch::Threads);
    assert_ne!(
        std::fs::read(a.artifact().join(data_file(0))).unwrap(),
        std::fs::read(c.artifact().join(data_file(0))).unwrap()
    );
}

#[test]
fn report_totals_match_steps() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg = small(t.path(), Mode::AggregatedSubfile);
    cfg.workload.compute_ms = 5;
    let r = run_ok(&cfg, &Launch::Threads);
    let sum: f64 = r.steps.iter().map(|s| s.perceived_write_s).sum();
    assert_eq!(sum, r.totals.io_sum_s);
    assert!(r.steps.iter().all(|s| s.compute_s >= 0.005));
    assert!(r.steps.iter().all(|s| s.perceived_write_s <= s.wall_write_s));
    assert_eq!(r.raw_bytes, cfg.workload.raw_bytes_per_step() * 3);

    let csv = std::fs::read_to_string(cfg.out.join("steps.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,perceived_write_s,compute_s"));
    assert_eq!(lines.count(), 3);
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn staging_capture_verifies_on_both_dataplanes() {
    let t = tempfile::tempdir().unwrap();
    let mut captures = Vec::new();
    for kind in [DataplaneKind::Tcp, DataplaneKind::Shm] {
        let mut cfg = small(&t.path().join(kind.name()), Mode::Staging);
        cfg.engine.dataplane = kind;
        run_ok(&cfg, &Launch::Threads);
        assert!(verify(&cfg.artifact(), &cfg.workload).unwrap().passed());
        captures.push(std::fs::read(cfg.artifact()).unwrap());
    }
    assert_eq!(captures[0], captures[1]);
}

#[test]
fn failing_ranks_give_a_partial_report() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg = small(t.path(), Mode::AggregatedSubfile);
    let blocker = t.path().join("not-a-dir");
    std::fs::write(&blocker, b"").unwrap();
    cfg.engine.bb_dir = Some(blocker.join("bb"));
    cfg.engine.drain = true;
    let r = run(&cfg, &Launch::Threads).unwrap();
    assert!(r.failure.is_some());
    assert!(r.steps.is_empty());
}

#[test]
fn ratio_sweep_subfile_counts() {
    let t = tempfile::tempdir().unwrap();
    let mut base = small(t.path(), Mode::AggregatedSubfile);
    base.workload.ranks = 16;
    base.workload.ranks_per_node = 8;
    base.workload.steps = 1;
    let cells = preset("ratio", &base).unwrap();
    let r = bench_sweep(&base, &cells, 1, &Launch::Threads, &t.path().join("sweep"), 0.0).unwrap();
    let counts: Vec<(u32, Option<usize>)> = r.rows.iter().map(|row| (row.ratio, row.subfiles)).collect();
    assert_eq!(counts, vec![(1, Some(16)), (2, Some(8)), (8, Some(2))]);
    assert!(t.path().join("sweep/sweep.csv").is_file());
}
