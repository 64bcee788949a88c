//! Shape arithmetic: trailing-dimension broadcasting and index mapping.
//!
//! Broadcast rule: shapes are aligned on their trailing dimensions, the
//! shorter one is padded with leading 1s, and a size-1 extent stretches to
//! match. No other implicit promotion.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast two shapes, or report which extents conflict.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Extent of `shape` at `back` positions from the end; 1 when out of range.
#[inline]
fn dim_from_end(shape: &[usize], back: usize) -> usize {
    if back < shape.len() {
        shape[shape.len() - 1 - back]
    } else {
        1
    }
}

/// Row-major element strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed through `bcast` (rank-padded, 0 for stretched
/// extents), so that a flat `bcast` index maps to the source element.
pub fn broadcast_strides(shape: &[usize], bcast: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let rank = bcast.len();
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let back = rank - 1 - i;
        if back < shape.len() {
            let j = shape.len() - 1 - back;
            out[i] = if shape[j] == 1 && bcast[i] != 1 { 0 } else { own[j] };
        }
    }
    out
}

/// Maps a flat index in `bcast` space to a flat index in the source tensor,
/// given the source's broadcast strides.
#[inline]
pub fn map_index(mut flat: usize, bcast: &[usize], bstrides: &[usize]) -> usize {
    let mut src = 0usize;
    for i in (0..bcast.len()).rev() {
        let extent = bcast[i];
        let coord = flat % extent;
        flat /= extent;
        src += coord * bstrides[i];
    }
    src
}

/// For each flat index of `full` (a batch-dim space), the flat index of the
/// corresponding element in `part` space, grouped by `part` index. Used to
/// make broadcast-reducing accumulations deterministic and parallel-safe.
pub fn reduction_groups(full: &[usize], part_padded: &[usize]) -> Vec<Vec<usize>> {
    let part_count = numel(part_padded).max(1);
    let mut groups = vec![Vec::new(); part_count];
    let bstrides = broadcast_strides_padded(part_padded, full);
    let total = numel(full).max(1);
    for flat in 0..total {
        let p = map_index(flat, full, &bstrides);
        groups[p].push(flat);
    }
    groups
}

/// Like [`broadcast_strides`] but for an already rank-aligned shape.
fn broadcast_strides_padded(shape: &[usize], bcast: &[usize]) -> Vec<usize> {
    debug_assert_eq!(shape.len(), bcast.len());
    let own = strides(shape);
    shape
        .iter()
        .zip(bcast.iter())
        .zip(own.iter())
        .map(|((&s, &b), &st)| if s == 1 && b != 1 { 0 } else { st })
        .collect()
}

/// Pads `shape` with leading 1s to `rank`.
pub fn pad_rank(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1usize; rank];
    out[rank - shape.len()..].copy_from_slice(shape);
    out
}
