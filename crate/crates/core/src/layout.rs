//! Canonical array layout: row-major, last axis fastest, little-endian.

use crate::error::{Error, Result};
use crate::types::{Selection, VariableDef};

/// Row-major linear element index of `point` within `shape`.
pub fn canonical_offset(point: &[u64], shape: &[u64]) -> Result<u64> {
    if point.len() != shape.len() {
        return Err(Error::Shape(format!(
            "point has {} axes, shape has {}",
            point.len(),
            shape.len()
        )));
    }
    let mut off = 0u64;
    for (axis, (&p, &extent)) in point.iter().zip(shape).enumerate() {
        if p >= extent {
            return Err(Error::Index {
                axis,
                index: p,
                extent,
            });
        }
        off = off * extent + p;
    }
    Ok(off)
}

/// Inverse of [`canonical_offset`].
pub fn canonical_point(mut offset: u64, shape: &[u64]) -> Vec<u64> {
    let mut point = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        point[d] = offset % shape[d];
        offset /= shape[d];
    }
    point
}

pub fn validate_selection(sel: &Selection, def: &VariableDef) -> Result<()> {
    validate_selection_shape(sel, &def.shape)
}

pub fn validate_selection_shape(sel: &Selection, shape: &[u64]) -> Result<()> {
    if sel.start.len() != shape.len() || sel.count.len() != shape.len() {
        return Err(Error::Selection(format!(
            "rank mismatch: selection has start rank {} and count rank {}, variable has rank {}",
            sel.start.len(),
            sel.count.len(),
            shape.len()
        )));
    }
    for (axis, ((&s, &c), &extent)) in sel.start.iter().zip(&sel.count).zip(shape).enumerate() {
        if c == 0 {
            return Err(Error::Selection(format!("axis {axis}: zero count")));
        }
        if s.checked_add(c).map_or(true, |end| end > extent) {
            return Err(Error::Selection(format!(
                "axis {axis}: start {s} + count {c} exceeds extent {extent}"
            )));
        }
    }
    Ok(())
}

/// Calls `f` with the global coordinates of the first element of every
/// last-axis row of `region`, in canonical order.
pub fn for_each_row(region: &Selection, mut f: impl FnMut(&[u64])) {
    let n = region.start.len();
    if n == 0 || region.count.iter().any(|&c| c == 0) {
        return;
    }
    let mut idx = region.start.clone();
    loop {
        f(&idx);
        // advance odometer over all axes but the last
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < region.start[d] + region.count[d] {
                break;
            }
            idx[d] = region.start[d];
        }
    }
}

/// Element offset of a global point inside a box laid out canonically.
fn local_offset(point: &[u64], bx: &Selection) -> u64 {
    let mut off = 0u64;
    for d in 0..point.len() {
        off = off * bx.count[d] + (point[d] - bx.start[d]);
    }
    off
}

/// Copies `region` (which must lie inside both boxes) from a buffer laid out
/// as `src_box` into a buffer laid out as `dst_box`.
pub fn copy_region(
    src: &[u8],
    src_box: &Selection,
    dst: &mut [u8],
    dst_box: &Selection,
    region: &Selection,
    elem_size: usize,
) {
    let row = *region.count.last().unwrap() as usize * elem_size;
    for_each_row(region, |p| {
        let s = local_offset(p, src_box) as usize * elem_size;
        let d = local_offset(p, dst_box) as usize * elem_size;
        dst[d..d + row].copy_from_slice(&src[s..s + row]);
    });
}

/// A contiguous run of a box in the canonical space of `shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub canonical: u64,
    pub local: u64,
    pub len: u64,
}

/// The box's rows as canonical runs, in canonical order. Rows that are
/// adjacent in both spaces are coalesced.
pub fn runs(bx: &Selection, shape: &[u64]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    let row = *bx.count.last().unwrap();
    let mut local = 0u64;
    for_each_row(bx, |p| {
        let canonical = canonical_offset(p, shape).expect("box inside shape");
        match out.last_mut() {
            Some(last) if last.canonical + last.len == canonical && last.local + last.len == local => {
                last.len += row;
            }
            _ => out.push(Run {
                canonical,
                local,
                len: row,
            }),
        }
        local += row;
    });
    out
}

/// Marks covered elements of a target box and reports gaps.
pub struct Coverage {
    target: Selection,
    covered: Vec<bool>,
    count: u64,
}

impl Coverage {
    pub fn new(target: &Selection) -> Self {
        Self {
            target: target.clone(),
            covered: vec![false; target.num_elements() as usize],
            count: 0,
        }
    }

    pub fn mark(&mut self, region: &Selection) {
        let row = *region.count.last().unwrap() as usize;
        let target = &self.target;
        let covered = &mut self.covered;
        let mut added = 0u64;
        for_each_row(region, |p| {
            let o = local_offset(p, target) as usize;
            for c in &mut covered[o..o + row] {
                if !*c {
                    *c = true;
                    added += 1;
                }
            }
        });
        self.count += added;
    }

    pub fn is_complete(&self) -> bool {
        self.count == self.covered.len() as u64
    }

    /// First uncovered element as a global point.
    pub fn first_gap(&self) -> Option<Vec<u64>> {
        let i = self.covered.iter().position(|c| !c)?;
        let mut p = canonical_point(i as u64, &self.target.count);
        for (d, v) in p.iter_mut().enumerate() {
            *v += self.target.start[d];
        }
        Some(p)
    }
}
