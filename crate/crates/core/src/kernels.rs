//! Slice-level compute kernels behind the recorded tensor ops.
//!
//! All kernels write disjoint output chunks when parallelized and keep every
//! floating-point reduction in a fixed order, so gradients are bit-identical
//! regardless of thread count.

use crate::dtype::Element;
use crate::error::{Error, Result};
use crate::par::{axpy, dot, for_each_chunk_mut};
use crate::shape::{
    broadcast_shapes, broadcast_strides, map_index, numel, pad_rank, reduction_groups,
};

/// Batched matmul geometry: `a [..,m,k] x b [..,k,n] -> out [..,m,n]` with
/// batch extents broadcast by the trailing-dimension rule.
pub struct MatmulPlan {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    a_bstrides: Vec<usize>,
    b_bstrides: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        let a_batch = &a_shape[..a_shape.len() - 2];
        let b_batch = &b_shape[..b_shape.len() - 2];
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let batch = broadcast_shapes("matmul", a_batch, b_batch)?;
        // Batch strides in element units: one a matrix spans m*k elements.
        let a_bstrides: Vec<usize> = broadcast_strides(a_batch, &batch)
            .into_iter()
            .map(|s| s * m * ka)
            .collect();
        let b_bstrides: Vec<usize> = broadcast_strides(b_batch, &batch)
            .into_iter()
            .map(|s| s * kb * n)
            .collect();
        Ok(MatmulPlan {
            a_bstrides,
            b_bstrides,
            a_batch: a_batch.to_vec(),
            b_batch: b_batch.to_vec(),
            batch,
            m,
            k: ka,
            n,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    pub fn out_len(&self) -> usize {
        numel(&self.batch) * self.m * self.n
    }
}

pub fn matmul_forward<T: Element>(plan: &MatmulPlan, a: &[T], b: &[T], out: &mut [T]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for_each_chunk_mut(out, n, |row, out_row| {
        let batch_lin = row / m;
        let i = row % m;
        let a_off = map_index(batch_lin, &plan.batch, &plan.a_bstrides);
        let b_off = map_index(batch_lin, &plan.batch, &plan.b_bstrides);
        out_row.fill(T::zero());
        let a_row = &a[a_off + i * k..a_off + (i + 1) * k];
        for (kk, &c) in a_row.iter().enumerate() {
            axpy(out_row, c, &b[b_off + kk * n..b_off + (kk + 1) * n]);
        }
    });
}

/// Accumulates `g . b^T` into `grad_a`, sum-reducing over batch extents that
/// were stretched on the `a` side.
pub fn matmul_backward_a<T: Element>(plan: &MatmulPlan, b: &[T], g: &[T], grad_a: &mut [T]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let a_batch_padded = pad_rank(&plan.a_batch, plan.batch.len());
    let groups = reduction_groups(&plan.batch, &a_batch_padded);
    for_each_chunk_mut(grad_a, k, |arow, ga_row| {
        let a_blin = arow / m;
        let i = arow % m;
        for &ob in &groups[a_blin] {
            let b_off = map_index(ob, &plan.batch, &plan.b_bstrides);
            let g_row = &g[ob * m * n + i * n..ob * m * n + (i + 1) * n];
            for (r, slot) in ga_row.iter_mut().enumerate() {
                *slot += dot(g_row, &b[b_off + r * n..b_off + (r + 1) * n]);
            }
        }
    });
}

/// Accumulates `a^T . g` into `grad_b`, sum-reducing over batch extents that
/// were stretched on the `b` side.
pub fn matmul_backward_b<T: Element>(plan: &MatmulPlan, a: &[T], g: &[T], grad_b: &mut [T]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let b_batch_padded = pad_rank(&plan.b_batch, plan.batch.len());
    let groups = reduction_groups(&plan.batch, &b_batch_padded);
    for_each_chunk_mut(grad_b, n, |brow, gb_row| {
        let b_blin = brow / k;
        let r = brow % k;
        for &ob in &groups[b_blin] {
            let a_off = map_index(ob, &plan.batch, &plan.a_bstrides);
            let g_base = ob * m * n;
            for i in 0..m {
                let c = a[a_off + i * k + r];
                axpy(gb_row, c, &g[g_base + i * n..g_base + (i + 1) * n]);
            }
        }
    });
}

/// Stabilized softmax over the last `width` elements of each row.
pub fn softmax_rows<T: Element>(x: &[T], width: usize, out: &mut [T]) {
    for_each_chunk_mut(out, width, |row, out_row| {
        let x_row = &x[row * width..(row + 1) * width];
        softmax_row_into(x_row, out_row);
    });
}

#[inline]
pub fn softmax_row_into<T: Element>(x_row: &[T], out_row: &mut [T]) {
    let mut mx = x_row[0];
    for &v in &x_row[1..] {
        mx = mx.max(v);
    }
    let mut sum = T::zero();
    for (o, &v) in out_row.iter_mut().zip(x_row.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out_row.iter_mut() {
        *o *= inv;
    }
}

/// dL/dx_j = y_j * (g_j - sum_i g_i y_i), accumulated into `gx`.
pub fn softmax_rows_backward<T: Element>(y: &[T], g: &[T], width: usize, gx: &mut [T]) {
    for_each_chunk_mut(gx, width, |row, gx_row| {
        let y_row = &y[row * width..(row + 1) * width];
        let g_row = &g[row * width..(row + 1) * width];
        let s = dot(g_row, y_row);
        for j in 0..width {
            gx_row[j] += y_row[j] * (g_row[j] - s);
        }
    });
}

/// Softmax over the causal prefix of each row of a `[.., t, t]` tensor:
/// row i normalizes entries 0..=i, the rest are exactly zero.
pub fn causal_softmax_rows<T: Element>(x: &[T], t: usize, out: &mut [T]) {
    for_each_chunk_mut(out, t, |row, out_row| {
        let active = (row % t) + 1;
        let x_row = &x[row * t..row * t + active];
        softmax_row_into(x_row, &mut out_row[..active]);
        out_row[active..].fill(T::zero());
    });
}

pub fn causal_softmax_rows_backward<T: Element>(y: &[T], g: &[T], t: usize, gx: &mut [T]) {
    for_each_chunk_mut(gx, t, |row, gx_row| {
        let active = (row % t) + 1;
        let y_row = &y[row * t..row * t + active];
        let g_row = &g[row * t..row * t + active];
        let s = dot(g_row, y_row);
        for j in 0..active {
            gx_row[j] += y_row[j] * (g_row[j] - s);
        }
    });
}
