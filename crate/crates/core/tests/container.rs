use std::path::{Path, PathBuf};

use miniio::comm::run_ranks;
use miniio::container::{consolidate, list_subfiles, ContainerReader, ContainerWriter};
use miniio::engine::CloseMode;
use miniio::flatfile::FlatReader;
use miniio::types::{Dtype, EngineParams, Selection, Topology, VariableDef};
use miniio::Error;

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn params(pfs: &Path) -> EngineParams {
    EngineParams {
        pfs_dir: pfs.to_path_buf(),
        ..Default::default()
    }
}

/// Rank r owns rows [r*h, (r+1)*h) of an (ny, nx) grid.
fn row_slab(rank: u32, world: u32, ny: u64, nx: u64) -> Selection {
    let h = ny / world as u64;
    Selection::new(vec![rank as u64 * h, 0], vec![h, nx])
}

fn cell(step: u64, y: u64, x: u64) -> f32 {
    (step * 1000 + y * 10 + x) as f32
}

fn slab_bytes(sel: &Selection, step: u64) -> Vec<u8> {
    let mut v = Vec::new();
    for y in sel.start[0]..sel.start[0] + sel.count[0] {
        for x in sel.start[1]..sel.start[1] + sel.count[1] {
            v.push(cell(step, y, x));
        }
    }
    f32_bytes(&v)
}

fn write_grid(p: EngineParams, world: u32, rpn: u32, steps: u64, ny: u64, nx: u64) {
    let def = VariableDef::new("T", Dtype::F32, vec![ny, nx]);
    run_ranks(Topology::new(world, rpn).unwrap(), None, move |comm| {
        let mut w = ContainerWriter::open(&comm, &p, &[def.clone()], "out")?;
        for s in 0..steps {
            let sel = row_slab(comm.rank(), world, ny, nx);
            w.put("T", s, &sel, &slab_bytes(&sel, s))?;
            w.end_step()?;
        }
        w.close(CloseMode::Wait)?;
        Ok(())
    })
    .unwrap();
}

fn dir(pfs: &Path) -> PathBuf {
    pfs.join("out.mbp")
}

#[test]
fn single_aggregator_round_trip() {
    let t = tempfile::tempdir().unwrap();
    write_grid(params(t.path()), 4, 4, 2, 8, 6);
    let d = dir(t.path());
    assert_eq!(list_subfiles(&d).unwrap().len(), 1);
    let r = ContainerReader::open(&d).unwrap();
    assert_eq!(r.steps().collect::<Vec<_>>(), vec![0, 1]);
    let full = Selection::new(vec![0, 0], vec![8, 6]);
    assert_eq!(r.read("T", 1, &full).unwrap(), slab_bytes(&full, 1));
    let one = row_slab(2, 4, 8, 6);
    assert_eq!(r.read("T", 0, &one).unwrap(), slab_bytes(&one, 0));
}

#[test]
fn read_spanning_two_writers_matches_assembly() {
    let t = tempfile::tempdir().unwrap();
    let mut p = params(t.path());
    p.aggregation_ratio = Some(1);
    write_grid(p, 2, 2, 1, 8, 6);
    let r = ContainerReader::open(&dir(t.path())).unwrap();
    let idx = r.step_index(0).unwrap();
    assert_eq!(idx.blocks.len(), 2);
    assert!(idx.blocks[0].selection().intersect(&idx.blocks[1].selection()).is_none());

    // assemble from the raw blocks independently of the reader's copy path
    let sel = Selection::new(vec![2, 1], vec![4, 3]);
    let mut oracle = Vec::new();
    for y in 2..6 {
        for x in 1..4 {
            let b = idx
                .blocks
                .iter()
                .find(|b| y >= b.start[0] && y < b.start[0] + b.count[0])
                .unwrap();
            let raw = r.load_block(b, 4).unwrap();
            let i = ((y - b.start[0]) * b.count[1] + x) as usize * 4;
            oracle.extend_from_slice(&raw[i..i + 4]);
        }
    }
    assert_eq!(r.read("T", 0, &sel).unwrap(), oracle);
    assert_eq!(oracle, slab_bytes(&sel, 0));
}

#[test]
fn wrong_step_rejected() {
    let t = tempfile::tempdir().unwrap();
    let p = params(t.path());
    let def = VariableDef::new("T", Dtype::F32, vec![4]);
    let res = run_ranks(Topology::new(1, 1).unwrap(), None, move |comm| {
        let mut w = ContainerWriter::open(&comm, &p, &[def.clone()], "out")?;
        let sel = def.full_selection();
        w.put("T", 0, &sel, &[0; 16])?;
        w.end_step()?;
        w.end_step()?;
        let e = w.put("T", 3, &sel, &[0; 16]).unwrap_err();
        Ok(matches!(e, Error::StepOrder { expected: 2, got: 3 }))
    })
    .unwrap();
    assert!(res[0]);
}

#[test]
fn inconsistent_defs_fail_open() {
    let t = tempfile::tempdir().unwrap();
    let p = params(t.path());
    let res = run_ranks(Topology::new(2, 2).unwrap(), None, move |comm| {
        let n = 4 + comm.rank() as u64;
        let def = VariableDef::new("T", Dtype::F32, vec![n]);
        Ok(matches!(
            ContainerWriter::open(&comm, &p, &[def], "out"),
            Err(Error::Open(_))
        ))
    })
    .unwrap();
    assert_eq!(res, vec![true, true]);
}

#[test]
fn burst_buffer_placement_and_equivalence() {
    let t = tempfile::tempdir().unwrap();
    let direct = t.path().join("direct");
    write_grid(params(&direct), 4, 2, 3, 8, 6);

    let pfs = t.path().join("pfs");
    let bb = t.path().join("bb");
    let mut p = params(&pfs);
    p.bb_dir = Some(bb.clone());
    p.drain = true;
    write_grid(p, 4, 2, 3, 8, 6);

    assert!(bb.join("node0/out.mbp/data.0").exists());
    assert!(bb.join("node1/out.mbp/data.1").exists());
    for f in ["data.0", "data.1", "index.jsonl"] {
        assert_eq!(
            std::fs::read(dir(&direct).join(f)).unwrap(),
            std::fs::read(dir(&pfs).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flipped_byte_is_corrupt_block() {
    let t = tempfile::tempdir().unwrap();
    write_grid(params(t.path()), 2, 2, 1, 8, 6);
    let d = dir(t.path());
    let data = d.join("data.0");
    let mut b = std::fs::read(&data).unwrap();
    b[5] ^= 0x10;
    std::fs::write(&data, b).unwrap();
    let r = ContainerReader::open(&d).unwrap();
    let e = r.read_full("T", 0).unwrap_err();
    assert!(matches!(e, Error::CorruptBlock { subfile: 0, offset: 0 }), "{e}");
}

#[test]
fn truncated_index_shows_committed_steps() {
    let t = tempfile::tempdir().unwrap();
    write_grid(params(t.path()), 2, 2, 4, 8, 6);
    let d = dir(t.path());
    let idx = std::fs::read(d.join("index.jsonl")).unwrap();
    let ends: Vec<usize> = idx
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == b'\n')
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ends.len(), 4);
    // keep three lines and half of the fourth
    std::fs::write(d.join("index.jsonl"), &idx[..(ends[2] + ends[3]) / 2]).unwrap();
    let r = ContainerReader::open(&d).unwrap();
    assert_eq!(r.steps().collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(r.read_full("T", 2).unwrap(), slab_bytes(&Selection::new(vec![0, 0], vec![8, 6]), 2));
}

#[test]
fn empty_container_has_no_steps() {
    let t = tempfile::tempdir().unwrap();
    write_grid(params(t.path()), 2, 2, 0, 8, 6);
    let r = ContainerReader::open(&dir(t.path())).unwrap();
    assert_eq!(r.steps().count(), 0);
}

#[test]
fn gap_is_coverage_error() {
    let t = tempfile::tempdir().unwrap();
    let p = params(t.path());
    let def = VariableDef::new("T", Dtype::F32, vec![8, 6]);
    run_ranks(Topology::new(2, 2).unwrap(), None, move |comm| {
        let mut w = ContainerWriter::open(&comm, &p, &[def.clone()], "out")?;
        if comm.rank() == 0 {
            let sel = row_slab(0, 2, 8, 6);
            w.put("T", 0, &sel, &slab_bytes(&sel, 0))?;
        }
        w.end_step()?;
        w.close(CloseMode::Wait)?;
        Ok(())
    })
    .unwrap();
    let r = ContainerReader::open(&dir(t.path())).unwrap();
    assert!(r.read("T", 0, &row_slab(0, 2, 8, 6)).is_ok());
    assert!(matches!(r.read_full("T", 0), Err(Error::Coverage(_))));
}

#[test]
fn consolidate_matches_row_major_oracle() {
    let t = tempfile::tempdir().unwrap();
    write_grid(params(t.path()), 2, 2, 2, 4, 4);
    let out = t.path().join("flat.cff");
    let rep = consolidate(&dir(t.path()), &out).unwrap();
    assert_eq!(rep.steps, 2);
    assert_eq!(rep.per_step_seconds.len(), 2);
    let f = FlatReader::open(&out).unwrap();
    for s in 0..2 {
        let oracle: Vec<f32> = (0..16).map(|i| cell(s, i / 4, i % 4)).collect();
        assert_eq!(f.read_var("T", s).unwrap(), f32_bytes(&oracle));
    }
}

#[test]
fn subfile_count_follows_ratio() {
    for (ratio, want) in [(1, 8), (2, 4), (4, 2)] {
        let t = tempfile::tempdir().unwrap();
        let mut p = params(t.path());
        p.aggregation_ratio = Some(ratio);
        write_grid(p, 8, 4, 1, 8, 6);
        assert_eq!(list_subfiles(&dir(t.path())).unwrap().len(), want, "ratio {ratio}");
        let r = ContainerReader::open(&dir(t.path())).unwrap();
        assert_eq!(r.read_full("T", 0).unwrap(), slab_bytes(&Selection::new(vec![0, 0], vec![8, 6]), 0));
    }
}

#[test]
fn constant_variable_read_from_earlier_step() {
    let t = tempfile::tempdir().unwrap();
    let p = params(t.path());
    let mut hgt = VariableDef::new("HGT", Dtype::F64, vec![3]);
    hgt.step_varying = false;
    let defs = vec![hgt, VariableDef::new("T", Dtype::F32, vec![2])];
    run_ranks(Topology::new(1, 1).unwrap(), None, move |comm| {
        let mut w = ContainerWriter::open(&comm, &p, &defs, "out")?;
        for s in 0..3 {
            if s == 0 {
                let v: Vec<u8> = [1.0f64, 2.0, 3.0].iter().flat_map(|x| x.to_le_bytes()).collect();
                w.put("HGT", 0, &defs[0].full_selection(), &v)?;
            }
            w.put("T", s, &defs[1].full_selection(), &f32_bytes(&[s as f32; 2]))?;
            w.end_step()?;
        }
        w.close(CloseMode::Wait)?;
        Ok(())
    })
    .unwrap();
    let r = ContainerReader::open(&dir(t.path())).unwrap();
    assert_eq!(r.read_full("HGT", 2).unwrap(), r.read_full("HGT", 0).unwrap());
    let info = std::fs::read_to_string(dir(t.path()).join("info.json")).unwrap();
    assert!(info.contains("\"step_varying\": false"));
}
