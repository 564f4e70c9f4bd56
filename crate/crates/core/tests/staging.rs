use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use miniio::comm::run_ranks;
use miniio::engine::{CloseMode, StepReport};
use miniio::error::Error;
use miniio::staging::{contact_file, ReaderOptions, StageReader, StageWriter};
use miniio::types::{
    DataplaneKind, Dtype, EngineParams, QueueFullPolicy, Selection, Topology, VariableDef,
};

fn defs() -> Vec<VariableDef> {
    vec![
        VariableDef::new("A", Dtype::F32, vec![8, 4]),
        VariableDef::new("B", Dtype::I64, vec![8, 4]),
    ]
}

fn patch(rank: u32, world: u32) -> Selection {
    let h = 8 / world as u64;
    Selection::new(vec![rank as u64 * h, 0], vec![h, 4])
}

fn value(var: usize, step: u64, y: u64, x: u64) -> Vec<u8> {
    let v = (step * 100 + y * 4 + x) as i64;
    if var == 0 {
        (v as f32 * 0.5).to_le_bytes().to_vec()
    } else {
        (-v).to_le_bytes().to_vec()
    }
}

fn bytes_of(var: usize, step: u64, sel: &Selection) -> Vec<u8> {
    let mut out = Vec::new();
    for y in sel.start[0]..sel.start[0] + sel.count[0] {
        for x in sel.start[1]..sel.start[1] + sel.count[1] {
            out.extend(value(var, step, y, x));
        }
    }
    out
}

fn params(dir: &Path) -> EngineParams {
    EngineParams {
        pfs_dir: dir.to_path_buf(),
        step_timeout_ms: 10_000,
        ..Default::default()
    }
}

fn opts() -> ReaderOptions {
    ReaderOptions {
        timeout: Duration::from_secs(20),
        ..Default::default()
    }
}

/// Runs `world` writer ranks for `steps` steps and returns rank 0's reports
/// and close extras.
fn produce(
    p: EngineParams,
    world: u32,
    steps: u64,
) -> (Vec<StepReport>, serde_json::Map<String, serde_json::Value>) {
    let out = run_ranks(Topology::new(world, world).unwrap(), None, move |comm| {
        let d = defs();
        let mut w = StageWriter::open(&comm, &p, &d, "s")?;
        let sel = patch(comm.rank(), world);
        let mut reports = Vec::new();
        for s in 0..steps {
            for (v, def) in d.iter().enumerate() {
                w.put(&def.name, s, &sel, &bytes_of(v, s, &sel))?;
            }
            reports.push(w.end_step()?);
        }
        let summary = w.close(CloseMode::Wait)?;
        Ok((reports, summary.extra))
    })
    .unwrap();
    out.into_iter().next().unwrap()
}

/// Reads every step fully, holding each for `hold`; returns steps seen.
fn consume(dir: &Path, hold: Duration) -> thread::JoinHandle<Vec<u64>> {
    let cf = contact_file(dir, "s");
    thread::spawn(move || {
        let mut r = StageReader::connect_contact(&cf, opts()).unwrap();
        assert_eq!(r.defs(), defs().as_slice());
        let mut seen = Vec::new();
        while let Some(idx) = r.begin_step().unwrap() {
            let step = idx.step;
            for v in 0..2 {
                let got = r.get_full(&defs()[v].name).unwrap();
                let full = Selection::new(vec![0, 0], vec![8, 4]);
                assert_eq!(got, bytes_of(v, step, &full), "var {v} step {step}");
            }
            thread::sleep(hold);
            r.end_step().unwrap();
            seen.push(step);
        }
        seen
    })
}

#[test]
fn reader_sees_every_step_in_order() {
    let t = tempfile::tempdir().unwrap();
    let reader = consume(t.path(), Duration::ZERO);
    let (reports, _) = produce(params(t.path()), 2, 4);
    assert_eq!(reader.join().unwrap(), vec![0, 1, 2, 3]);
    assert!(reports.iter().all(|r| !r.skipped));
    assert!(!contact_file(t.path(), "s").exists());
}

#[test]
fn shm_dataplane_matches_tcp() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.dataplane = DataplaneKind::Shm;
    let cf = contact_file(t.path(), "s");
    let reader = thread::spawn(move || {
        let mut r = StageReader::connect_contact(&cf, opts()).unwrap();
        assert_eq!(r.dataplane().kind, DataplaneKind::Shm);
        let mut all = Vec::new();
        while r.begin_step().unwrap().is_some() {
            all.push(r.get_full("A").unwrap());
            all.push(r.get_full("B").unwrap());
            r.end_step().unwrap();
        }
        all
    });
    produce(p, 2, 3);
    let shm = reader.join().unwrap();
    let full = Selection::new(vec![0, 0], vec![8, 4]);
    let expect: Vec<Vec<u8>> = (0..3)
        .flat_map(|s| [bytes_of(0, s, &full), bytes_of(1, s, &full)])
        .collect();
    assert_eq!(shm, expect);
}

#[test]
fn remote_host_falls_back_to_tcp() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.dataplane = DataplaneKind::Shm;
    let cf = contact_file(t.path(), "s");
    let reader = thread::spawn(move || {
        let o = ReaderOptions {
            hostname: Some("elsewhere".into()),
            ..opts()
        };
        let mut r = StageReader::connect_contact(&cf, o).unwrap();
        let kind = r.dataplane().kind;
        while r.begin_step().unwrap().is_some() {
            r.get_full("A").unwrap();
            r.end_step().unwrap();
        }
        kind
    });
    produce(p, 1, 2);
    assert_eq!(reader.join().unwrap(), DataplaneKind::Tcp);
}

#[test]
fn two_readers_both_get_everything() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.min_readers = 2;
    let a = consume(t.path(), Duration::ZERO);
    let b = consume(t.path(), Duration::from_millis(5));
    produce(p, 2, 5);
    assert_eq!(a.join().unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(b.join().unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn version_mismatch_is_refused() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.min_readers = 0;
    run_ranks(Topology::new(1, 1).unwrap(), None, move |comm| {
        let w = StageWriter::open(&comm, &p, &defs(), "s")?;
        let ep = w.endpoint().unwrap();
        let o = ReaderOptions {
            version: 99,
            ..opts()
        };
        match StageReader::connect(&ep, o) {
            Err(Error::Protocol(m)) => assert!(m.contains("99"), "{m}"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("mismatched reader accepted"),
        }
        w.close(CloseMode::Wait)?;
        Ok(())
    })
    .unwrap();
}

#[test]
fn queue_limit_one_blocks_on_a_slow_reader() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.queue_limit = 1;
    let hold = Duration::from_millis(120);
    let reader = consume(t.path(), hold);
    let (reports, extra) = produce(p, 1, 4);
    assert_eq!(reader.join().unwrap(), vec![0, 1, 2, 3]);
    for r in &reports[1..] {
        assert!(r.perceived_write_seconds >= 0.110, "step {} took {}", r.step, r.perceived_write_seconds);
    }
    assert_eq!(extra["max_unreleased"], 1);
}

#[test]
fn queue_limit_zero_never_blocks() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.queue_limit = 0;
    let reader = consume(t.path(), Duration::from_millis(120));
    let (reports, _) = produce(p, 1, 4);
    assert_eq!(reader.join().unwrap(), vec![0, 1, 2, 3]);
    for r in &reports {
        assert!(r.perceived_write_seconds < 0.010, "step {} took {}", r.step, r.perceived_write_seconds);
    }
}

#[test]
fn discard_drops_incoming_steps() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.queue_limit = 1;
    p.queue_full_policy = QueueFullPolicy::Discard;
    let reader = consume(t.path(), Duration::from_millis(60));
    let (reports, extra) = produce(p, 1, 5);
    let seen = reader.join().unwrap();
    let skipped: Vec<u64> = reports.iter().filter(|r| r.skipped).map(|r| r.step).collect();
    assert!(!skipped.is_empty());
    assert!(reports.iter().all(|r| r.perceived_write_seconds < 0.05));
    assert_eq!(seen.len() + skipped.len(), 5);
    assert!(seen.iter().all(|s| !skipped.contains(s)));
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(extra["skipped_steps"], serde_json::json!(skipped));
}

#[test]
fn bad_gets_are_protocol_errors() {
    let t = tempfile::tempdir().unwrap();
    let cf = contact_file(t.path(), "s");
    let reader = thread::spawn(move || {
        let mut r = StageReader::connect_contact(&cf, opts()).unwrap();
        r.begin_step().unwrap().unwrap();
        assert!(matches!(r.get_full("B"), Err(Error::Protocol(_))));
        assert!(matches!(r.get_full("nope"), Err(Error::Protocol(_))));
        r.get_full("A").unwrap();
        r.end_step().unwrap();
        assert!(matches!(r.get_full("A"), Err(Error::Protocol(_))));
        assert!(r.begin_step().unwrap().is_none());
    });
    let p = params(t.path());
    run_ranks(Topology::new(1, 1).unwrap(), None, move |comm| {
        let mut w = StageWriter::open(&comm, &p, &defs(), "s")?;
        let sel = patch(0, 1);
        w.put("A", 0, &sel, &bytes_of(0, 0, &sel))?;
        w.end_step()?;
        w.close(CloseMode::Wait)?;
        Ok(())
    })
    .unwrap();
    reader.join().unwrap();
}

#[test]
fn writer_stalls_once_readers_are_gone() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.step_timeout_ms = 200;
    let cf = contact_file(t.path(), "s");
    let reader = thread::spawn(move || {
        let r = StageReader::connect_contact(&cf, opts()).unwrap();
        drop(r);
    });
    let res = run_ranks(Topology::new(1, 1).unwrap(), None, move |comm| {
        let mut w = StageWriter::open(&comm, &p, &defs(), "s")?;
        // let the disconnect land
        thread::sleep(Duration::from_millis(100));
        let sel = patch(0, 1);
        let t0 = Instant::now();
        w.put("A", 0, &sel, &bytes_of(0, 0, &sel))?;
        let e = w.end_step().map(|_| ());
        Ok((e, t0.elapsed()))
    })
    .unwrap();
    reader.join().unwrap();
    let (e, took) = &res[0];
    assert!(matches!(e, Err(Error::Stall(_))), "{e:?}");
    assert!(*took >= Duration::from_millis(190));
}

#[test]
fn buffers_return_to_baseline() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.queue_limit = 2;
    let reader = consume(t.path(), Duration::ZERO);
    let (_, extra) = produce(p, 2, 100);
    assert_eq!(reader.join().unwrap().len(), 100);
    assert_eq!(extra["bytes_held"], 0);
    assert_eq!(extra["held_steps"], 0);
    assert!(extra["max_unreleased"].as_u64().unwrap() <= 2);
    assert_eq!(extra["released_cleanly"], true);
}
