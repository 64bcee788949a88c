//! Recorded dense-tensor computation with exact reverse-mode gradients.
//!
//! A [`Trace`] is a Wengert tape: every op appends a node holding the output
//! values plus whatever the backward rule needs. [`Trace::backward`] walks the
//! tape once in reverse and accumulates gradients in a deterministic order.
//! A trace and its tensors are confined to one execution context; independent
//! traces may run in parallel with no shared state.

use crate::dtype::Element;
use crate::error::{Error, Result};
use crate::kernels::{
    causal_softmax_rows, causal_softmax_rows_backward, matmul_backward_a, matmul_backward_b,
    matmul_forward, softmax_rows, softmax_rows_backward, MatmulPlan,
};
use crate::par::{dot, for_each_chunk_mut};
use crate::shape::{broadcast_shapes, broadcast_strides, map_index, numel, strides};

/// Identity of a tensor within one [`Trace`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
    Gelu,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum OpRecord<T: Element> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Unary {
        kind: UnaryKind,
        a: TensorId,
    },
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
    },
    Softmax {
        a: TensorId,
    },
    CausalSoftmax {
        a: TensorId,
    },
    RmsNorm {
        x: TensorId,
        weight: TensorId,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        lse: Vec<T>,
    },
    Rope {
        x: TensorId,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Reshape {
        a: TensorId,
    },
    Permute {
        a: TensorId,
        perm: Vec<usize>,
    },
    SumAll {
        a: TensorId,
    },
    SelectScalar {
        a: TensorId,
        index: usize,
    },
}

struct Node<T: Element> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: OpRecord<T>,
}

/// Tape of op records in topological order.
pub struct Trace<T: Element> {
    nodes: Vec<Node<T>>,
    backward_run: bool,
}

const EW_CHUNK: usize = 16 * 1024;

impl<T: Element> Default for Trace<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Trace<T> {
    pub fn new() -> Self {
        Trace {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<T>,
        requires_grad: bool,
        op: OpRecord<T>,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn check(&self, id: TensorId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("{op}: tensor not in this trace")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.node(id).values
    }

    /// Gradient of `id`, populated by [`Trace::backward`] for leaves and
    /// intermediates that require gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.node(id).grad.as_deref()
    }

    pub fn read_scalar(&self, id: TensorId) -> T {
        debug_assert_eq!(self.node(id).values.len(), 1);
        self.node(id).values[0]
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn leaf(&mut self, values: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("leaf: zero extent in shape {shape:?}")));
        }
        if numel(&shape) != values.len() {
            return Err(Error::invalid(format!(
                "leaf: shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(self.push(shape, values, requires_grad, OpRecord::Leaf))
    }

    pub fn constant(&mut self, values: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![T::from_f64(v)], false, OpRecord::Leaf)
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    /// Batched matrix product with trailing-dimension batch broadcasting.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let plan = MatmulPlan::new(&self.node(a).shape, &self.node(b).shape)?;
        let mut out = vec![T::zero(); plan.out_len()];
        matmul_forward(&plan, &self.node(a).values, &self.node(b).values, &mut out);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(plan.out_shape(), out, rg, OpRecord::Matmul { a, b }))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: TensorId) -> Result<TensorId> {
        self.check(a, "ew_unary")?;
        let x = &self.node(a).values;
        let mut out = vec![T::zero(); x.len()];
        match kind {
            UnaryKind::Relu => ew_map(x, &mut out, |v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => ew_map(x, &mut out, sigmoid),
            UnaryKind::Tanh => ew_map(x, &mut out, |v| v.tanh()),
            UnaryKind::Identity => ew_map(x, &mut out, |v| v),
            UnaryKind::Gelu => ew_map(x, &mut out, gelu),
            UnaryKind::Exp => ew_map(x, &mut out, |v| v.exp()),
            UnaryKind::Log => {
                if let Some(&bad) = x.iter().find(|v| **v <= T::zero()) {
                    return Err(Error::invalid(format!("ew_unary log: non-positive value {bad}")));
                }
                ew_map(x, &mut out, |v| v.ln());
            }
            UnaryKind::Neg => ew_map(x, &mut out, |v| -v),
        }
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, out, rg, OpRecord::Unary { kind, a }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a, "ew_binary")?;
        self.check(b, "ew_binary")?;
        let out_shape = broadcast_shapes("ew_binary", &self.node(a).shape, &self.node(b).shape)?;
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        if kind == BinaryKind::Div {
            if let Some(pos) = bv.iter().position(|v| *v == T::zero()) {
                return Err(Error::invalid(format!(
                    "ew_binary div: division by zero (divisor element {pos})"
                )));
            }
        }
        let out_len = numel(&out_shape);
        let mut out = vec![T::zero(); out_len];
        let f = binary_fn::<T>(kind);
        if self.node(a).shape == out_shape && self.node(b).shape == out_shape {
            for_each_chunk_mut(&mut out, EW_CHUNK, |ci, oc| {
                let base = ci * EW_CHUNK;
                for (j, o) in oc.iter_mut().enumerate() {
                    *o = f(av[base + j], bv[base + j]);
                }
            });
        } else if bv.len() == 1 {
            let c = bv[0];
            for_each_chunk_mut(&mut out, EW_CHUNK, |ci, oc| {
                let base = ci * EW_CHUNK;
                for (j, o) in oc.iter_mut().enumerate() {
                    *o = f(av[base + j], c);
                }
            });
        } else if av.len() == 1 {
            let c = av[0];
            for_each_chunk_mut(&mut out, EW_CHUNK, |ci, oc| {
                let base = ci * EW_CHUNK;
                for (j, o) in oc.iter_mut().enumerate() {
                    *o = f(c, bv[base + j]);
                }
            });
        } else {
            let sa = broadcast_strides(&self.node(a).shape, &out_shape);
            let sb = broadcast_strides(&self.node(b).shape, &out_shape);
            for (i, o) in out.iter_mut().enumerate() {
                let ia = map_index(i, &out_shape, &sa);
                let ib = map_index(i, &out_shape, &sb);
                *o = f(av[ia], bv[ib]);
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out_shape, out, rg, OpRecord::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiplies by a trace-local scalar constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// Stabilized softmax over the last dimension; rows sum to 1.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a, "softmax_lastdim")?;
        let shape = self.node(a).shape.clone();
        if shape.is_empty() {
            return Err(Error::invalid("softmax_lastdim: rank-0 tensor"));
        }
        let width = *shape.last().unwrap();
        let mut out = vec![T::zero(); self.node(a).values.len()];
        softmax_rows(&self.node(a).values, width, &mut out);
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, out, rg, OpRecord::Softmax { a }))
    }

    /// Softmax over the causal prefix of each row of a `[.., t, t]` score
    /// tensor; entries above the diagonal come out exactly zero.
    pub fn causal_softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a, "causal_softmax")?;
        let shape = self.node(a).shape.clone();
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: shape.clone(),
                rhs: shape.clone(),
            });
        }
        let t = *shape.last().unwrap();
        let mut out = vec![T::zero(); self.node(a).values.len()];
        causal_softmax_rows(&self.node(a).values, t, &mut out);
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, out, rg, OpRecord::CausalSoftmax { a }))
    }

    /// `x / sqrt(mean(x^2) + eps) * weight` over the last dimension.
    pub fn rms_norm(&mut self, x: TensorId, weight: TensorId, eps: f64) -> Result<TensorId> {
        self.check(x, "rms_norm")?;
        self.check(weight, "rms_norm")?;
        let shape = self.node(x).shape.clone();
        let d = *shape.last().ok_or_else(|| Error::invalid("rms_norm: rank-0 input"))?;
        if self.node(weight).shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: shape.clone(),
                rhs: self.node(weight).shape.clone(),
            });
        }
        let xv = &self.node(x).values;
        let wv = &self.node(weight).values;
        let rows = xv.len() / d;
        let epst = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut inv_rms = vec![T::zero(); rows];
        for (row, slot) in inv_rms.iter_mut().enumerate() {
            let xr = &xv[row * d..(row + 1) * d];
            let ms = dot(xr, xr) * inv_d;
            *slot = T::one() / (ms + epst).sqrt();
        }
        let mut out = vec![T::zero(); xv.len()];
        for_each_chunk_mut(&mut out, d, |row, oc| {
            let r = inv_rms[row];
            let xr = &xv[row * d..(row + 1) * d];
            for j in 0..d {
                oc[j] = xr[j] * r * wv[j];
            }
        });
        let rg = self.node(x).requires_grad || self.node(weight).requires_grad;
        Ok(self.push(shape, out, rg, OpRecord::RmsNorm { x, weight, inv_rms }))
    }

    /// Row gather: `out[.., :] = table[ids[..], :]`. Backward scatter-adds.
    pub fn embedding_lookup(
        &mut self,
        table: TensorId,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<TensorId> {
        self.check(table, "embedding_lookup")?;
        let tshape = self.node(table).shape.clone();
        if tshape.len() != 2 {
            return Err(Error::invalid(format!(
                "embedding_lookup: table must be rank-2, got {tshape:?}"
            )));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::invalid(format!(
                "embedding_lookup: ids shape {:?} implies {} ids, got {}",
                ids_shape,
                numel(ids_shape),
                ids.len()
            )));
        }
        let (v, d) = (tshape[0], tshape[1]);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::invalid(format!(
                    "embedding_lookup: id {id} at position {pos} out of range (table rows {v})"
                )));
            }
        }
        let tv = &self.node(table).values;
        let mut out = vec![T::zero(); ids.len() * d];
        for_each_chunk_mut(&mut out, d, |row, oc| {
            oc.copy_from_slice(&tv[ids[row] * d..(ids[row] + 1) * d]);
        });
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.node(table).requires_grad;
        Ok(self.push(
            shape,
            out,
            rg,
            OpRecord::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over all rows of `-log softmax(logits)[target]`, log-sum-exp
    /// stabilized. Logits are `[.., classes]`; targets index the last dim.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        self.check(logits, "cross_entropy_mean")?;
        let shape = self.node(logits).shape.clone();
        let v = *shape
            .last()
            .ok_or_else(|| Error::invalid("cross_entropy_mean: rank-0 logits"))?;
        let rows = self.node(logits).values.len() / v;
        if targets.len() != rows {
            return Err(Error::invalid(format!(
                "cross_entropy_mean: {rows} rows but {} targets",
                targets.len()
            )));
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy_mean: target {t} at row {row} out of range (classes {v})"
                )));
            }
        }
        let xv = &self.node(logits).values;
        let mut lse = vec![T::zero(); rows];
        for_each_chunk_mut(&mut lse, 1, |row, slot| {
            let xr = &xv[row * v..(row + 1) * v];
            let mut mx = xr[0];
            for &x in &xr[1..] {
                mx = mx.max(x);
            }
            let mut sum = T::zero();
            for &x in xr {
                sum += (x - mx).exp();
            }
            slot[0] = mx + sum.ln();
        });
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            total += lse[row] - xv[row * v + t];
        }
        let loss = total / T::from_f64(rows as f64);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            OpRecord::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                lse,
            },
        ))
    }

    /// Rotary position transform on `[b, t, heads, head_dim]`: consecutive
    /// value pairs rotate by `pos * theta_base^(-2i/head_dim)`.
    pub fn rope_apply(
        &mut self,
        x: TensorId,
        positions: &[usize],
        theta_base: f64,
    ) -> Result<TensorId> {
        self.check(x, "rope_apply")?;
        let shape = self.node(x).shape.clone();
        if shape.len() != 4 {
            return Err(Error::invalid(format!(
                "rope_apply: expected rank-4 [b, t, heads, head_dim], got {shape:?}"
            )));
        }
        let (t, h, dh) = (shape[1], shape[2], shape[3]);
        if dh % 2 != 0 {
            return Err(Error::invalid(format!("rope_apply: head_dim {dh} must be even")));
        }
        if positions.len() != t {
            return Err(Error::invalid(format!(
                "rope_apply: {} positions for {} sequence slots",
                positions.len(),
                t
            )));
        }
        let half = dh / 2;
        let mut cos = vec![T::zero(); t * half];
        let mut sin = vec![T::zero(); t * half];
        for (ti, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let freq = theta_base.powf(-2.0 * i as f64 / dh as f64);
                let angle = pos as f64 * freq;
                cos[ti * half + i] = T::from_f64(angle.cos());
                sin[ti * half + i] = T::from_f64(angle.sin());
            }
        }
        let xv = &self.node(x).values;
        let mut out = vec![T::zero(); xv.len()];
        for_each_chunk_mut(&mut out, dh, |row, oc| {
            // row indexes [b, t, h]; the trig row depends on t only.
            let ti = (row / h) % t;
            let xr = &xv[row * dh..(row + 1) * dh];
            for i in 0..half {
                let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
                oc[2 * i] = x0 * c - x1 * s;
                oc[2 * i + 1] = x0 * s + x1 * c;
            }
        });
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, OpRecord::Rope { x, cos, sin }))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        self.check(a, "reshape")?;
        if numel(&new_shape) != self.node(a).values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.node(a).shape.clone(),
                rhs: new_shape,
            });
        }
        let values = self.node(a).values.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(new_shape, values, rg, OpRecord::Reshape { a }))
    }

    /// Axis permutation (materialized).
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        self.check(a, "permute")?;
        let shape = self.node(a).shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![T::zero(); self.node(a).values.len()];
        permute_into(&self.node(a).values, &shape, perm, &out_shape, &mut out);
        let rg = self.node(a).requires_grad;
        Ok(self.push(
            out_shape,
            out,
            rg,
            OpRecord::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Sum of every element, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a, "sum_all")?;
        let mut total = T::zero();
        for &v in &self.node(a).values {
            total += v;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![1], vec![total], rg, OpRecord::SumAll { a }))
    }

    /// Extracts one element as a `[1]`-shaped tensor.
    pub fn select_scalar(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        self.check(a, "select_scalar")?;
        let n = self.node(a).values.len();
        if index >= n {
            return Err(Error::invalid(format!(
                "select_scalar: index {index} out of range (len {n})"
            )));
        }
        let v = self.node(a).values[index];
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![1], vec![v], rg, OpRecord::SelectScalar { a, index }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits every record exactly once in
    /// reverse order; repeated calls on the same trace are rejected.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: loss not in this trace"));
        }
        if self.backward_run {
            return Err(Error::invalid(
                "backward: already run on this trace; record a fresh trace instead",
            ));
        }
        if self.node(loss).values.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::invalid(
                "backward: loss does not depend on any gradient-requiring leaf",
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            if self.nodes[idx].requires_grad {
                self.nodes[idx].grad = Some(g);
            }
        }
        self.backward_run = true;
        Ok(())
    }

    fn needs(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: TensorId) -> &'g mut [T] {
        let len = self.node(id).values.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[idx].op {
            OpRecord::Leaf => {}
            OpRecord::Matmul { a, b } => {
                let plan = MatmulPlan::new(&self.node(*a).shape, &self.node(*b).shape)
                    .expect("validated at record time");
                if self.needs(*a) {
                    let bv = &self.node(*b).values;
                    matmul_backward_a(&plan, bv, g, self.buf(grads, *a));
                }
                if self.needs(*b) {
                    let av = &self.node(*a).values;
                    matmul_backward_b(&plan, av, g, self.buf(grads, *b));
                }
            }
            OpRecord::Unary { kind, a } => {
                if !self.needs(*a) {
                    return;
                }
                let x = &self.node(*a).values;
                let y = &self.nodes[idx].values;
                let kind = *kind;
                let a = *a;
                let gx = self.buf(grads, a);
                for_each_chunk_mut(gx, EW_CHUNK, |ci, gc| {
                    let base = ci * EW_CHUNK;
                    for (j, slot) in gc.iter_mut().enumerate() {
                        let i = base + j;
                        *slot += unary_deriv(kind, x[i], y[i]) * g[i];
                    }
                });
            }
            OpRecord::Binary { kind, a, b } => self.backward_binary(*kind, *a, *b, idx, g, grads),
            OpRecord::Softmax { a } => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].values;
                    let width = *self.nodes[idx].shape.last().unwrap();
                    softmax_rows_backward(y, g, width, self.buf(grads, *a));
                }
            }
            OpRecord::CausalSoftmax { a } => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].values;
                    let t = *self.nodes[idx].shape.last().unwrap();
                    causal_softmax_rows_backward(y, g, t, self.buf(grads, *a));
                }
            }
            OpRecord::RmsNorm { x, weight, inv_rms } => {
                let d = *self.node(*x).shape.last().unwrap();
                let xv = &self.node(*x).values;
                let wv = &self.node(*weight).values;
                let rows = xv.len() / d;
                let inv_d = T::one() / T::from_f64(d as f64);
                if self.needs(*x) {
                    let gx = self.buf(grads, *x);
                    for row in 0..rows {
                        let r = inv_rms[row];
                        let xr = &xv[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let mut s = T::zero();
                        for j in 0..d {
                            s += gr[j] * wv[j] * xr[j];
                        }
                        let coef = r * r * r * s * inv_d;
                        let gxr = &mut gx[row * d..(row + 1) * d];
                        for j in 0..d {
                            gxr[j] += r * wv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if self.needs(*weight) {
                    let gw = self.buf(grads, *weight);
                    for row in 0..rows {
                        let r = inv_rms[row];
                        let xr = &xv[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        for j in 0..d {
                            gw[j] += gr[j] * xr[j] * r;
                        }
                    }
                }
            }
            OpRecord::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.node(*table).shape[1];
                    let gt = self.buf(grads, *table);
                    for (row, &id) in ids.iter().enumerate() {
                        let gr = &g[row * d..(row + 1) * d];
                        let slot = &mut gt[id * d..(id + 1) * d];
                        for j in 0..d {
                            slot[j] += gr[j];
                        }
                    }
                }
            }
            OpRecord::CrossEntropy { logits, targets, lse } => {
                if self.needs(*logits) {
                    let v = *self.node(*logits).shape.last().unwrap();
                    let xv = &self.node(*logits).values;
                    let rows = targets.len();
                    let scale = g[0] / T::from_f64(rows as f64);
                    let gx = self.buf(grads, *logits);
                    for_each_chunk_mut(gx, v, |row, gr| {
                        let xr = &xv[row * v..(row + 1) * v];
                        let l = lse[row];
                        for j in 0..v {
                            gr[j] += scale * (xr[j] - l).exp();
                        }
                        gr[targets[row]] -= scale;
                    });
                }
            }
            OpRecord::Rope { x, cos, sin } => {
                if self.needs(*x) {
                    let shape = &self.node(*x).shape;
                    let (t, h, dh) = (shape[1], shape[2], shape[3]);
                    let half = dh / 2;
                    let gx = self.buf(grads, *x);
                    for_each_chunk_mut(gx, dh, |row, gr| {
                        let ti = (row / h) % t;
                        let gthis = &g[row * dh..(row + 1) * dh];
                        for i in 0..half {
                            let (c, s) = (cos[ti * half + i], sin[ti * half + i]);
                            let (g0, g1) = (gthis[2 * i], gthis[2 * i + 1]);
                            // Inverse rotation (transpose of the pair rotation).
                            gr[2 * i] += g0 * c + g1 * s;
                            gr[2 * i + 1] += -g0 * s + g1 * c;
                        }
                    });
                }
            }
            OpRecord::Reshape { a } => {
                if self.needs(*a) {
                    let gx = self.buf(grads, *a);
                    for (slot, &gv) in gx.iter_mut().zip(g.iter()) {
                        *slot += gv;
                    }
                }
            }
            OpRecord::Permute { a, perm } => {
                if self.needs(*a) {
                    // Gradient of a permutation is the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape = &self.nodes[idx].shape;
                    let in_shape = &self.node(*a).shape;
                    let mut tmp = vec![T::zero(); g.len()];
                    permute_into(g, out_shape, &inv, in_shape, &mut tmp);
                    let gx = self.buf(grads, *a);
                    for (slot, &gv) in gx.iter_mut().zip(tmp.iter()) {
                        *slot += gv;
                    }
                }
            }
            OpRecord::SumAll { a } => {
                if self.needs(*a) {
                    let g0 = g[0];
                    let gx = self.buf(grads, *a);
                    for slot in gx.iter_mut() {
                        *slot += g0;
                    }
                }
            }
            OpRecord::SelectScalar { a, index } => {
                if self.needs(*a) {
                    let g0 = g[0];
                    self.buf(grads, *a)[*index] += g0;
                }
            }
        }
    }

    fn backward_binary(
        &self,
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
        idx: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let out_shape = &self.nodes[idx].shape;
        let a_shape = &self.node(a).shape;
        let b_shape = &self.node(b).shape;
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let same = a_shape == out_shape && b_shape == out_shape;
        if same {
            if self.needs(a) {
                let gx = self.buf(grads, a);
                for_each_chunk_mut(gx, EW_CHUNK, |ci, gc| {
                    let base = ci * EW_CHUNK;
                    for (j, slot) in gc.iter_mut().enumerate() {
                        let i = base + j;
                        *slot += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[i],
                            BinaryKind::Div => g[i] / bv[i],
                        };
                    }
                });
            }
            if self.needs(b) {
                let gx = self.buf(grads, b);
                for_each_chunk_mut(gx, EW_CHUNK, |ci, gc| {
                    let base = ci * EW_CHUNK;
                    for (j, slot) in gc.iter_mut().enumerate() {
                        let i = base + j;
                        *slot += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[i],
                            BinaryKind::Div => -g[i] * av[i] / (bv[i] * bv[i]),
                        };
                    }
                });
            }
            return;
        }
        // Broadcast path: gradients sum-reduce over stretched extents.
        // Runs sequentially; broadcast operands in this codebase are small.
        let sa = broadcast_strides(a_shape, out_shape);
        let sb = broadcast_strides(b_shape, out_shape);
        let needs_a = self.needs(a);
        let needs_b = self.needs(b);
        let total = g.len();
        let mut ga_tmp = if needs_a { vec![T::zero(); av.len()] } else { Vec::new() };
        let mut gb_tmp = if needs_b { vec![T::zero(); bv.len()] } else { Vec::new() };
        for i in 0..total {
            let ia = map_index(i, out_shape, &sa);
            let ib = map_index(i, out_shape, &sb);
            let gi = g[i];
            if needs_a {
                ga_tmp[ia] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => gi,
                    BinaryKind::Mul => gi * bv[ib],
                    BinaryKind::Div => gi / bv[ib],
                };
            }
            if needs_b {
                gb_tmp[ib] += match kind {
                    BinaryKind::Add => gi,
                    BinaryKind::Sub => -gi,
                    BinaryKind::Mul => gi * av[ia],
                    BinaryKind::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
                };
            }
        }
        if needs_a {
            let gx = self.buf(grads, a);
            for (slot, &v) in gx.iter_mut().zip(ga_tmp.iter()) {
                *slot += v;
            }
        }
        if needs_b {
            let gx = self.buf(grads, b);
            for (slot, &v) in gx.iter_mut().zip(gb_tmp.iter()) {
                *slot += v;
            }
        }
    }
}

fn ew_map<T: Element>(x: &[T], out: &mut [T], f: impl Fn(T) -> T + Send + Sync) {
    for_each_chunk_mut(out, EW_CHUNK, |ci, oc| {
        let base = ci * EW_CHUNK;
        for (j, o) in oc.iter_mut().enumerate() {
            *o = f(x[base + j]);
        }
    });
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh-approximation gelu.
#[inline]
fn gelu<T: Element>(x: T) -> T {
    let s = T::from_f64(GELU_SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn unary_deriv<T: Element>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Tanh => T::one() - y * y,
        UnaryKind::Identity => T::one(),
        UnaryKind::Gelu => {
            let s = T::from_f64(GELU_SQRT_2_OVER_PI);
            let c = T::from_f64(GELU_COEF);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let u = s * (x + c * x * x * x);
            let t = u.tanh();
            let du = s * (T::one() + three * c * x * x);
            half * (T::one() + t) + half * x * (T::one() - t * t) * du
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
        UnaryKind::Neg => -T::one(),
    }
}

#[inline]
fn binary_fn<T: Element>(kind: BinaryKind) -> fn(T, T) -> T {
    match kind {
        BinaryKind::Add => |a, b| a + b,
        BinaryKind::Sub => |a, b| a - b,
        BinaryKind::Mul => |a, b| a * b,
        BinaryKind::Div => |a, b| a / b,
    }
}

/// `out[i] = x[map(i)]` for an axis permutation; parallel over output rows.
fn permute_into<T: Element>(
    x: &[T],
    in_shape: &[usize],
    perm: &[usize],
    out_shape: &[usize],
    out: &mut [T],
) {
    let in_strides = strides(in_shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // Chunk over the last output axis when it is contiguous in the input,
    // otherwise fall back to per-element mapping.
    let rank = out_shape.len();
    let last = out_shape[rank - 1];
    let last_contig = perm[rank - 1] == in_shape.len() - 1;
    if last_contig {
        for_each_chunk_mut(out, last, |row, oc| {
            let mut rest = row;
            let mut src = 0usize;
            for i in (0..rank - 1).rev() {
                let extent = out_shape[i];
                src += (rest % extent) * mapped[i];
                rest /= extent;
            }
            oc.copy_from_slice(&x[src..src + last]);
        });
    } else {
        for_each_chunk_mut(out, last, |row, oc| {
            let mut rest = row;
            let mut src = 0usize;
            for i in (0..rank - 1).rev() {
                let extent = out_shape[i];
                src += (rest % extent) * mapped[i];
                rest /= extent;
            }
            for (j, o) in oc.iter_mut().enumerate() {
                *o = x[src + j * mapped[rank - 1]];
            }
        });
    }
}
