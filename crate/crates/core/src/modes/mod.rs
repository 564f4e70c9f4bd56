//! Comparator output modes: serial funnel, file per process, and two-phase
//! collective writes to one shared file. All three produce raw canonical data.

mod fpp;
mod funnel;
mod two_phase;

use std::path::Path;

pub use fpp::{stitch, FppWriter, StitchReport};
pub use funnel::FunnelWriter;
pub use two_phase::{region_bounds, TwoPhaseWriter};

use crate::comm::Comm;
use crate::engine::all_or_nothing;
use crate::error::{Error, Result};
use crate::flatfile;
use crate::storage::Storage;
use crate::types::{Selection, VariableDef};

pub fn flat_name(name: &str) -> String {
    format!("{name}.cff")
}

pub fn fpp_dir_name(name: &str) -> String {
    format!("{name}.fpp")
}

/// Collective reset of a shared flat file before anyone writes into it.
/// Rank 0 lays down a fresh header; the first rank of each node clears that
/// node's burst-buffer copy.
fn prepare_shared(comm: &Comm, storage: &mut Storage, rel: &Path, defs: &[VariableDef]) -> Result<()> {
    let topo = comm.topology();
    let rank = comm.rank();
    all_or_nothing(comm, || {
        if rank % topo.ranks_per_node == 0 {
            if let Some(bb) = storage.bb_root() {
                let _ = std::fs::remove_file(bb.join(rel));
            }
        }
        if rank == 0 {
            let p = storage.pfs_root().join(rel);
            let _ = std::fs::remove_file(&p);
        }
        Ok(())
    })?;
    all_or_nothing(comm, || {
        if rank == 0 {
            let sink = storage.open(rel, false)?;
            sink.write_at(storage, 0, &flatfile::header_bytes(defs, 0))?;
        }
        Ok(())
    })
}

/// Patch message: u32 var index, u32 rank of selection, start, count, bytes.
fn encode_patch(var: usize, sel: &Selection, bytes: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(8 + 16 * sel.start.len() + bytes.len());
    m.extend_from_slice(&(var as u32).to_le_bytes());
    m.extend_from_slice(&(sel.start.len() as u32).to_le_bytes());
    for v in sel.start.iter().chain(&sel.count) {
        m.extend_from_slice(&v.to_le_bytes());
    }
    m.extend_from_slice(bytes);
    m
}

fn decode_patch(m: &[u8]) -> Result<(usize, Selection, &[u8])> {
    let short = || Error::protocol("short patch message");
    let u32_at = |i: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(m.get(i..i + 4).ok_or_else(short)?.try_into().unwrap()))
    };
    let var = u32_at(0)? as usize;
    let nd = u32_at(4)? as usize;
    if nd > 4 {
        return Err(Error::protocol("patch rank out of range"));
    }
    let mut vals = Vec::with_capacity(2 * nd);
    for k in 0..2 * nd {
        let i = 8 + 8 * k;
        vals.push(u64::from_le_bytes(m.get(i..i + 8).ok_or_else(short)?.try_into().unwrap()));
    }
    let count = vals.split_off(nd);
    Ok((var, Selection::new(vals, count), &m[8 + 16 * nd..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_round_trip() {
        let sel = Selection::new(vec![1, 2, 0], vec![3, 4, 5]);
        let m = encode_patch(7, &sel, b"abc");
        let (v, s, b) = decode_patch(&m).unwrap();
        assert_eq!((v, s, b), (7, sel, &b"abc"[..]));
        assert!(decode_patch(&m[..10]).is_err());
    }
}
