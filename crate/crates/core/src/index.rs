//! Step index merging and its JSON Lines representation.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::types::StepIndex;

/// Merges per-writer fragments of one step.
///
/// Blocks are sorted by (var, writer_rank). The result is complete when every
/// rank in `expected_ranks` contributed at least one block.
pub fn index_merge(fragments: &[StepIndex], expected_ranks: &BTreeSet<u32>) -> Result<StepIndex> {
    let step = match fragments.first() {
        Some(f) => f.step,
        None => return Err(Error::format("index_merge: no fragments")),
    };
    let mut blocks = Vec::new();
    for f in fragments {
        if f.step != step {
            return Err(Error::format(format!(
                "index_merge: fragments for steps {step} and {}",
                f.step
            )));
        }
        for b in &f.blocks {
            if b.step != step {
                return Err(Error::format(format!(
                    "index_merge: block of {:?} carries step {} inside step {step}",
                    b.var, b.step
                )));
            }
        }
        blocks.extend(f.blocks.iter().cloned());
    }
    blocks.sort_by(|a, b| (a.var.as_str(), a.writer_rank).cmp(&(b.var.as_str(), b.writer_rank)));
    for w in blocks.windows(2) {
        if w[0].var == w[1].var && w[0].writer_rank == w[1].writer_rank {
            return Err(Error::DuplicateBlock {
                var: w[0].var.clone(),
                rank: w[0].writer_rank,
            });
        }
    }
    let contributed: BTreeSet<u32> = blocks.iter().map(|b| b.writer_rank).collect();
    let complete = expected_ranks.is_subset(&contributed);
    Ok(StepIndex {
        step,
        complete,
        blocks,
    })
}

/// One compact JSON line, without the trailing newline.
pub fn index_serialize(idx: &StepIndex) -> String {
    serde_json::to_string(idx).expect("StepIndex serializes")
}

pub fn index_parse(line: &str) -> Result<StepIndex> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    serde_json::from_str(line).map_err(|e| {
        // single-line input: serde's column is the byte position
        Error::Parse {
            position: e.column(),
            message: e.to_string(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use crate::types::BlockRecord;

    fn block(var: &str, rank: u32, step: u64) -> BlockRecord {
        BlockRecord {
            var: var.into(),
            step,
            writer_rank: rank,
            start: vec![rank as u64 * 2, 0],
            count: vec![2, 3],
            subfile_id: 0,
            offset: rank as u64 * 24,
            stored_nbytes: 24,
            raw_nbytes: 24,
            codec: Codec::None,
            level: 0,
            shuffle: false,
            checksum_raw: 0xDEAD_BEEF ^ rank,
            stat_min: -1.25,
            stat_max: 3.5e7,
        }
    }

    fn frag(rank: u32, vars: &[&str]) -> StepIndex {
        StepIndex {
            step: 4,
            complete: false,
            blocks: vars.iter().map(|v| block(v, rank, 4)).collect(),
        }
    }

    fn world(n: u32) -> BTreeSet<u32> {
        (0..n).collect()
    }

    #[test]
    fn merge_two_ranks_complete() {
        let m = index_merge(&[frag(1, &["T", "U"]), frag(0, &["U", "T"])], &world(2)).unwrap();
        assert!(m.complete);
        assert_eq!(m.blocks_for("T").count(), 2);
        assert_eq!(m.blocks_for("U").count(), 2);
        let keys: Vec<_> = m.blocks.iter().map(|b| (b.var.clone(), b.writer_rank)).collect();
        assert_eq!(
            keys,
            vec![("T".into(), 0), ("T".into(), 1), ("U".into(), 0), ("U".into(), 1)]
        );
    }

    #[test]
    fn merge_missing_rank_incomplete() {
        let m = index_merge(&[frag(0, &["T"])], &world(2)).unwrap();
        assert!(!m.complete);
    }

    #[test]
    fn merge_duplicate() {
        let e = index_merge(&[frag(0, &["T"]), frag(0, &["T"])], &world(1)).unwrap_err();
        assert!(matches!(e, Error::DuplicateBlock { ref var, rank: 0 } if var == "T"));
    }

    #[test]
    fn merge_order_insensitive() {
        let frags = [frag(0, &["T", "U"]), frag(1, &["U"]), frag(2, &["T", "W"])];
        let base = index_merge(&frags, &world(3)).unwrap();
        let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let f: Vec<_> = p.iter().map(|&i| frags[i].clone()).collect();
            assert_eq!(index_merge(&f, &world(3)).unwrap(), base);
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let idx = index_merge(&[frag(0, &["T", "U"]), frag(1, &["T"])], &world(2)).unwrap();
        assert_eq!(idx.blocks.len(), 3);
        let a = index_serialize(&idx);
        let b = index_serialize(&idx);
        assert_eq!(a, b);
        assert!(!a.contains(' ') && !a.contains('\n'));
        assert_eq!(index_parse(&a).unwrap(), idx);
    }

    #[test]
    fn field_order_fixed() {
        let s = index_serialize(&frag(0, &["T"]));
        let order = [
            "\"step\"", "\"complete\"", "\"blocks\"", "\"var\"", "\"rank\"", "\"start\"",
            "\"count\"", "\"subfile\"", "\"offset\"", "\"stored\"", "\"raw\"", "\"codec\"",
            "\"level\"", "\"shuffle\"", "\"crc32c\"", "\"min\"", "\"max\"",
        ];
        let mut last = 0;
        for key in order {
            let pos = s[last..].find(key).map(|p| p + last).unwrap_or_else(|| panic!("{key} in {s}"));
            last = pos;
        }
        assert!(s.contains("\"crc32c\":\"deadbeef\""));
    }

    #[test]
    fn truncated_line_is_parse_error() {
        let s = index_serialize(&frag(0, &["T"]));
        let e = index_parse(&s[..s.len() - 7]).unwrap_err();
        assert!(matches!(e, Error::Parse { position, .. } if position > 0));
    }
}
