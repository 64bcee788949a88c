//! Causal grouped-query attention with the value-mixing hook: plain
//! pass-through, scalar-weighted early-value reuse (the static variant), and
//! the per-token per-KV-head gated variant.

use serde::{Deserialize, Serialize};

use crate::dtype::Element;
use crate::error::{Error, Result};
use crate::trace::{TensorId, Trace};

/// Gate nonlinearity applied to the mixing-coefficient logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSpec {
    Relu,
    Sigmoid,
    Softmax,
    SoftmaxSigmoid,
    Tanh,
    Identity,
}

impl GateSpec {
    pub const ALL: [GateSpec; 6] = [
        GateSpec::Relu,
        GateSpec::Sigmoid,
        GateSpec::Softmax,
        GateSpec::SoftmaxSigmoid,
        GateSpec::Tanh,
        GateSpec::Identity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GateSpec::Relu => "relu",
            GateSpec::Sigmoid => "sigmoid",
            GateSpec::Softmax => "softmax",
            GateSpec::SoftmaxSigmoid => "softmax_sigmoid",
            GateSpec::Tanh => "tanh",
            GateSpec::Identity => "identity",
        }
    }
}

impl std::fmt::Display for GateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-layer attention parameters, all bias-free. `w_alpha` is present only
/// on gated layers (never layer 1).
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    pub w_alpha: Option<Vec<T>>,
}

/// Learnable coefficients for the scalar-mixing variant. `lambda1` for layer
/// `n` is `lambda_scale * softmax(raw_logits)[n-2]`, so the per-layer
/// coefficients always sum to `lambda_scale` and start at exactly 1 under
/// zero-initialized logits. `lambda2` is a single scalar shared across
/// layers.
#[derive(Clone, Debug)]
pub struct ResLambdas<T> {
    /// One logit per mixing layer (layers 2..=L), initialized to 0.
    pub raw_logits: Vec<T>,
    /// Shared coefficient on the current layer's values, initialized to 1.
    pub lambda2: Vec<T>,
}

impl<T: Element> ResLambdas<T> {
    pub fn unit_init(layers: usize) -> Self {
        ResLambdas {
            raw_logits: vec![T::zero(); layers - 1],
            lambda2: vec![T::one()],
        }
    }

    /// Fixed softmax scale: the number of layers participating in mixing.
    pub fn lambda_scale(layers: usize) -> f64 {
        (layers - 1) as f64
    }

    /// Current `lambda1` per mixing layer (index 0 is layer 2).
    pub fn lambda1_values(&self) -> Vec<f64> {
        let scale = Self::lambda_scale(self.raw_logits.len() + 1);
        let mx = self
            .raw_logits
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let exps: Vec<f64> = self
            .raw_logits
            .iter()
            .map(|&v| (v.to_f64() - mx).exp())
            .collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| scale * e / sum).collect()
    }
}

/// Staged (on-trace) attention weights.
#[derive(Clone, Copy, Debug)]
pub struct StagedAttention {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub w_alpha: Option<TensorId>,
}

/// How a layer mixes the stored first-layer values into its own.
#[derive(Clone, Copy, Debug)]
pub enum ValueMix {
    /// No mixing (plain transformer, and layer 1 of every variant).
    Plain,
    /// Scalar-weighted: `lambda1 * v_1 + lambda2 * v_n`.
    Res { lambda1: TensorId, lambda2: TensorId },
    /// Gated: `v_n + alpha * v_1` with `alpha` from the gate projection.
    Sat { w_alpha: TensorId, spec: GateSpec },
    /// Gated with an externally forced `alpha` tensor (interventions and
    /// equivalence harnesses).
    SatForced { alpha: TensorId },
}

pub struct AttentionOutput {
    /// Layer output after the output projection, `[b, t, d_model]`.
    pub y: TensorId,
    /// Raw value projection `[b, t, n_kv, d_head]`, captured before any
    /// mixing and never position-rotated.
    pub v_base: TensorId,
    /// Gate activations `[b, t, n_kv]` when a gated mix ran.
    pub alpha: Option<TensorId>,
}

/// Gate activations from the normalized hidden state: `logits = x W_alpha`,
/// then the spec's nonlinearity. Softmax-family gates are scaled by the
/// KV-head count so a uniform gate starts at 1 per head.
pub fn compute_gate<T: Element>(
    trace: &mut Trace<T>,
    x_norm: TensorId,
    w_alpha: TensorId,
    spec: GateSpec,
) -> Result<TensorId> {
    let n_kv = {
        let shape = trace.shape(w_alpha);
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "compute_gate: w_alpha must be rank-2 [d_model, n_kv], got {shape:?}"
            )));
        }
        shape[1]
    };
    let logits = trace.matmul(x_norm, w_alpha)?;
    match spec {
        GateSpec::Relu => trace.relu(logits),
        GateSpec::Sigmoid => trace.sigmoid(logits),
        GateSpec::Softmax => {
            let s = trace.softmax_lastdim(logits)?;
            trace.scale(s, n_kv as f64)
        }
        GateSpec::SoftmaxSigmoid => {
            let s = trace.softmax_lastdim(logits)?;
            let g = trace.sigmoid(logits)?;
            let sg = trace.mul(s, g)?;
            trace.scale(sg, n_kv as f64)
        }
        GateSpec::Tanh => trace.tanh(logits),
        GateSpec::Identity => Ok(logits),
    }
}

/// `v_n + alpha * v_1`, with `alpha [b, t, n_kv]` broadcasting over the
/// per-head value dimension. The coefficient on `v_n` is fixed at 1.
pub fn mix_values_sat<T: Element>(
    trace: &mut Trace<T>,
    v_n: TensorId,
    v_1: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let vshape = trace.shape(v_n).to_vec();
    if trace.shape(v_1) != vshape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "mix_values_sat",
            lhs: vshape,
            rhs: trace.shape(v_1).to_vec(),
        });
    }
    if vshape.len() != 4 || trace.shape(alpha) != &vshape[..3] {
        return Err(Error::ShapeMismatch {
            op: "mix_values_sat",
            lhs: vshape,
            rhs: trace.shape(alpha).to_vec(),
        });
    }
    let mut a_shape = vshape[..3].to_vec();
    a_shape.push(1);
    let a4 = trace.reshape(alpha, a_shape)?;
    let scaled = trace.mul(a4, v_1)?;
    trace.add(v_n, scaled)
}

/// `lambda1 * v_1 + lambda2 * v_n`, both coefficients layer-global scalars.
/// Layer 1 is the source layer and is never mixed.
pub fn mix_values_res<T: Element>(
    trace: &mut Trace<T>,
    v_n: TensorId,
    v_1: TensorId,
    lambda1: TensorId,
    lambda2: TensorId,
    layer: usize,
) -> Result<TensorId> {
    if layer <= 1 {
        return Err(Error::invalid(
            "mix_values_res: layer 1 supplies the stored values and is never mixed",
        ));
    }
    let t1 = trace.mul(v_1, lambda1)?;
    let t2 = trace.mul(v_n, lambda2)?;
    trace.add(t1, t2)
}

/// Causal scaled-dot-product attention with grouped KV heads.
///
/// `q [b, t, n_heads, d_head]`, `k`/`v` `[b, t, n_kv, d_head]`; query head
/// `h` attends through KV group `h / (n_heads / n_kv)`. Position `t` sees
/// keys at positions `<= t` only. Returns heads concatenated,
/// `[b, t, n_heads * d_head]`.
pub fn causal_attention<T: Element>(
    trace: &mut Trace<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let qs = trace.shape(q).to_vec();
    let ks = trace.shape(k).to_vec();
    if qs.len() != 4 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "causal_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (b, t, h, dh) = (qs[0], qs[1], qs[2], qs[3]);
    let n_kv = ks[2];
    if ks != [b, t, n_kv, dh] || trace.shape(v) != [b, t, n_kv, dh] {
        return Err(Error::ShapeMismatch {
            op: "causal_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    if h % n_kv != 0 {
        return Err(Error::invalid(format!(
            "causal_attention: n_heads {h} not divisible by n_kv {n_kv}"
        )));
    }
    let group = h / n_kv;

    let scale = 1.0 / (dh as f64).sqrt();
    let qsc = trace.scale(q, scale)?;
    // [b, t, h, dh] -> [b, n_kv, group, t, dh]
    let qp = trace.permute(qsc, &[0, 2, 1, 3])?;
    let qg = trace.reshape(qp, vec![b, n_kv, group, t, dh])?;
    // [b, t, n_kv, dh] -> [b, n_kv, 1, dh, t]
    let kp = trace.permute(k, &[0, 2, 3, 1])?;
    let kt = trace.reshape(kp, vec![b, n_kv, 1, dh, t])?;
    let scores = trace.matmul(qg, kt)?; // [b, n_kv, group, t, t]
    let attn = trace.causal_softmax_lastdim(scores)?;
    // [b, t, n_kv, dh] -> [b, n_kv, 1, t, dh]
    let vp = trace.permute(v, &[0, 2, 1, 3])?;
    let vg = trace.reshape(vp, vec![b, n_kv, 1, t, dh])?;
    let ctx = trace.matmul(attn, vg)?; // [b, n_kv, group, t, dh]
    let cp = trace.permute(ctx, &[0, 3, 1, 2, 4])?; // [b, t, n_kv, group, dh]
    trace.reshape(cp, vec![b, t, h * dh])
}

/// One attention sublayer: QKV projections from the normalized hidden state,
/// rotary on Q and K, the variant's value mix, attention, output projection.
///
/// Layer 1 never mixes; its raw value projection is returned as `v_base` for
/// deeper layers to reuse. `v_1` must be absent exactly at layer 1.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer_forward<T: Element>(
    trace: &mut Trace<T>,
    x_norm: TensorId,
    weights: &StagedAttention,
    n_heads: usize,
    n_kv: usize,
    layer: usize,
    v_1: Option<TensorId>,
    mix: ValueMix,
    rope_theta: f64,
) -> Result<AttentionOutput> {
    let xs = trace.shape(x_norm).to_vec();
    if xs.len() != 3 {
        return Err(Error::invalid(format!(
            "attention_layer_forward: expected [b, t, d_model] input, got {xs:?}"
        )));
    }
    let (b, t, _d) = (xs[0], xs[1], xs[2]);
    let h_width = trace.shape(weights.w_q)[1];
    let kv_width = trace.shape(weights.w_k)[1];
    if h_width % n_heads != 0 || kv_width % n_kv != 0 {
        return Err(Error::invalid(format!(
            "attention_layer_forward: projection widths {h_width}/{kv_width} \
             inconsistent with {n_heads} query / {n_kv} kv heads"
        )));
    }
    let dh = h_width / n_heads;
    if kv_width / n_kv != dh {
        return Err(Error::invalid(
            "attention_layer_forward: query and kv head dims disagree",
        ));
    }
    if layer == 1 && v_1.is_some() {
        return Err(Error::invalid(
            "attention_layer_forward: layer 1 is the source layer; v_1 must be absent",
        ));
    }
    if layer > 1 && v_1.is_none() {
        return Err(Error::invalid(format!(
            "attention_layer_forward: layer {layer} needs the stored first-layer values"
        )));
    }
    if layer > 1 {
        if let ValueMix::Sat { .. } = mix {
            if weights.w_alpha.is_none() {
                return Err(Error::invalid(format!(
                    "attention_layer_forward: gated mix at layer {layer} but w_alpha is absent"
                )));
            }
        }
    }

    let positions: Vec<usize> = (0..t).collect();
    let q = trace.matmul(x_norm, weights.w_q)?;
    let q = trace.reshape(q, vec![b, t, n_heads, dh])?;
    let q = trace.rope_apply(q, &positions, rope_theta)?;
    let k = trace.matmul(x_norm, weights.w_k)?;
    let k = trace.reshape(k, vec![b, t, n_kv, dh])?;
    let k = trace.rope_apply(k, &positions, rope_theta)?;
    let v = trace.matmul(x_norm, weights.w_v)?;
    let v_base = trace.reshape(v, vec![b, t, n_kv, dh])?;

    let (v_mixed, alpha) = if layer == 1 {
        (v_base, None)
    } else {
        let v_1 = v_1.expect("checked above");
        if trace.shape(v_1) != [b, t, n_kv, dh] {
            return Err(Error::ShapeMismatch {
                op: "attention_layer_forward",
                lhs: trace.shape(v_1).to_vec(),
                rhs: vec![b, t, n_kv, dh],
            });
        }
        match mix {
            ValueMix::Plain => (v_base, None),
            ValueMix::Res { lambda1, lambda2 } => (
                mix_values_res(trace, v_base, v_1, lambda1, lambda2, layer)?,
                None,
            ),
            ValueMix::Sat { w_alpha, spec } => {
                let alpha = compute_gate(trace, x_norm, w_alpha, spec)?;
                (mix_values_sat(trace, v_base, v_1, alpha)?, Some(alpha))
            }
            ValueMix::SatForced { alpha } => {
                (mix_values_sat(trace, v_base, v_1, alpha)?, Some(alpha))
            }
        }
    };

    let heads = causal_attention(trace, q, k, v_mixed)?;
    let y = trace.matmul(heads, weights.w_o)?;
    Ok(AttentionOutput { y, v_base, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gate_zero_logits_per_spec() {
        let (b, t, d, n_kv) = (2, 3, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, b * t * d);
        for spec in GateSpec::ALL {
            let mut tr = Trace::<f64>::new();
            let xn = tr.constant(x.clone(), vec![b, t, d]).unwrap();
            let w = tr.constant(vec![0.0; d * n_kv], vec![d, n_kv]).unwrap();
            let alpha = compute_gate(&mut tr, xn, w, spec).unwrap();
            let v = tr.values(alpha);
            let expect = match spec {
                GateSpec::Relu | GateSpec::Tanh | GateSpec::Identity => 0.0,
                GateSpec::Sigmoid => 0.5,
                // Uniform competition scaled by the head count.
                GateSpec::Softmax => 1.0,
                // softmax * sigmoid * n_kv = (1/n_kv) * 0.5 * n_kv.
                GateSpec::SoftmaxSigmoid => 0.5,
            };
            for &a in v {
                assert!((a - expect).abs() < 1e-12, "{spec}: {a} vs {expect}");
            }
        }
    }

    #[test]
    fn gate_softmax_equal_logits_gives_unit_per_head() {
        let (b, t, d, n_kv) = (1, 2, 4, 4);
        let mut tr = Trace::<f64>::new();
        // Constant input row and equal weight columns -> equal logits.
        let xn = tr.constant(vec![0.7; b * t * d], vec![b, t, d]).unwrap();
        let w = tr.constant(vec![0.3; d * n_kv], vec![d, n_kv]).unwrap();
        let alpha = compute_gate(&mut tr, xn, w, GateSpec::Softmax).unwrap();
        for &a in tr.values(alpha) {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_gate_zero_fraction_near_half_at_init() {
        // Symmetric random logits should sit at ~50% exact zeros.
        let (b, t, d, n_kv) = (8, 256, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, b * t * d);
        let bound = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = (0..d * n_kv).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut tr = Trace::<f64>::new();
        let xn = tr.constant(x, vec![b, t, d]).unwrap();
        let wa = tr.constant(w, vec![d, n_kv]).unwrap();
        let alpha = compute_gate(&mut tr, xn, wa, GateSpec::Relu).unwrap();
        let v = tr.values(alpha);
        assert!(v.len() >= 10_000, "need >= 1e4 gate entries, got {}", v.len());
        assert!(v.iter().all(|&a| a >= 0.0));
        let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
        assert!((0.4..=0.6).contains(&zeros), "zero fraction {zeros}");
    }

    #[test]
    fn gate_range_contracts() {
        let (b, t, d, n_kv) = (2, 16, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, b * t * d);
        let w = rand_vec(&mut rng, d * n_kv);
        for spec in GateSpec::ALL {
            let mut tr = Trace::<f64>::new();
            let xn = tr.constant(x.clone(), vec![b, t, d]).unwrap();
            let wa = tr.constant(w.clone(), vec![d, n_kv]).unwrap();
            let alpha = compute_gate(&mut tr, xn, wa, spec).unwrap();
            let v = tr.values(alpha);
            match spec {
                GateSpec::Relu | GateSpec::Sigmoid | GateSpec::Softmax | GateSpec::SoftmaxSigmoid => {
                    assert!(v.iter().all(|&a| a >= 0.0), "{spec} went negative");
                }
                GateSpec::Tanh => assert!(v.iter().all(|&a| (-1.0..=1.0).contains(&a))),
                GateSpec::Identity => {}
            }
            if spec == GateSpec::Softmax {
                for row in v.chunks(n_kv) {
                    let s: f64 = row.iter().sum();
                    assert!((s - n_kv as f64).abs() < 1e-5, "row sum {s}");
                }
            }
            if spec == GateSpec::SoftmaxSigmoid {
                for row in v.chunks(n_kv) {
                    let s: f64 = row.iter().sum();
                    assert!(s <= n_kv as f64 + 1e-5, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn mix_sat_closed_and_open_gate() {
        let (b, t, n_kv, dh) = (2, 3, 2, 4);
        let n = b * t * n_kv * dh;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vn = rand_vec(&mut rng, n);
        let v1 = rand_vec(&mut rng, n);
        let shape = vec![b, t, n_kv, dh];

        let mut tr = Trace::<f64>::new();
        let vni = tr.constant(vn.clone(), shape.clone()).unwrap();
        let v1i = tr.constant(v1.clone(), shape.clone()).unwrap();
        let zero = tr.constant(vec![0.0; b * t * n_kv], vec![b, t, n_kv]).unwrap();
        let y = mix_values_sat(&mut tr, vni, v1i, zero).unwrap();
        assert_eq!(tr.values(y), vn.as_slice(), "closed gate must reproduce v_n exactly");

        let one = tr.constant(vec![1.0; b * t * n_kv], vec![b, t, n_kv]).unwrap();
        let y = mix_values_sat(&mut tr, vni, v1i, one).unwrap();
        let want: Vec<f64> = vn.iter().zip(&v1).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(tr.values(y), &want) < 1e-15);
    }

    #[test]
    fn mix_sat_single_head_scaling() {
        // alpha = 2 on head j only, v_1 = v_n: head j becomes 3*v_n.
        let (b, t, n_kv, dh) = (1, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vn = rand_vec(&mut rng, b * t * n_kv * dh);
        let mut alpha = vec![0.0; b * t * n_kv];
        let j = 1;
        for tt in 0..t {
            alpha[tt * n_kv + j] = 2.0;
        }
        let mut tr = Trace::<f64>::new();
        let vni = tr.constant(vn.clone(), vec![b, t, n_kv, dh]).unwrap();
        let v1i = tr.constant(vn.clone(), vec![b, t, n_kv, dh]).unwrap();
        let ai = tr.constant(alpha, vec![b, t, n_kv]).unwrap();
        let y = mix_values_sat(&mut tr, vni, v1i, ai).unwrap();
        let got = tr.values(y);
        for tt in 0..t {
            for h in 0..n_kv {
                for r in 0..dh {
                    let i = (tt * n_kv + h) * dh + r;
                    let want = if h == j { 3.0 * vn[i] } else { vn[i] };
                    assert!((got[i] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mix_res_cases_and_layer_guard() {
        let (b, t, n_kv, dh) = (2, 2, 2, 3);
        let n = b * t * n_kv * dh;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vn = rand_vec(&mut rng, n);
        let v1 = rand_vec(&mut rng, n);
        let shape = vec![b, t, n_kv, dh];

        let mut tr = Trace::<f64>::new();
        let vni = tr.constant(vn.clone(), shape.clone()).unwrap();
        let v1i = tr.constant(v1.clone(), shape.clone()).unwrap();
        let zero = tr.scalar(0.0);
        let one = tr.scalar(1.0);
        let y = mix_values_res(&mut tr, vni, v1i, zero, one, 2).unwrap();
        assert!(max_abs_diff(tr.values(y), &vn) < 1e-15);

        // Unit init: v_1 + v_n.
        let l1 = tr.scalar(1.0);
        let y = mix_values_res(&mut tr, vni, v1i, l1, one, 3).unwrap();
        let want: Vec<f64> = vn.iter().zip(&v1).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(tr.values(y), &want) < 1e-15);

        assert!(mix_values_res(&mut tr, vni, v1i, zero, one, 1).is_err());
    }

    #[test]
    fn constant_gate_matches_scalar_mix() {
        // alpha == c with lambda2 = 1 must equal the scalar mix with
        // lambda1 = c, bit-for-bit up to f64 rounding.
        let (b, t, n_kv, dh) = (2, 3, 2, 4);
        let n = b * t * n_kv * dh;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vn = rand_vec(&mut rng, n);
        let v1 = rand_vec(&mut rng, n);
        let shape = vec![b, t, n_kv, dh];
        let c = 0.73;

        let mut tr = Trace::<f64>::new();
        let vni = tr.constant(vn.clone(), shape.clone()).unwrap();
        let v1i = tr.constant(v1.clone(), shape.clone()).unwrap();
        let alpha = tr.constant(vec![c; b * t * n_kv], vec![b, t, n_kv]).unwrap();
        let sat = mix_values_sat(&mut tr, vni, v1i, alpha).unwrap();
        let l1 = tr.scalar(c);
        let l2 = tr.scalar(1.0);
        let res = mix_values_res(&mut tr, vni, v1i, l1, l2, 2).unwrap();
        assert!(max_abs_diff(tr.values(sat), tr.values(res)) < 1e-12);
    }

    #[test]
    fn res_lambdas_unit_init_and_softmax_invariant() {
        let layers = 6;
        let res = ResLambdas::<f64>::unit_init(layers);
        for l1 in res.lambda1_values() {
            assert!((l1 - 1.0).abs() < 1e-12);
        }
        // Invariant holds for arbitrary logits, not just at init.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let res = ResLambdas::<f64> {
            raw_logits: rand_vec(&mut rng, layers - 1),
            lambda2: vec![rng.gen_range(-1.0..1.0)],
        };
        let scale = ResLambdas::<f64>::lambda_scale(layers);
        let total: f64 = res.lambda1_values().iter().map(|l| l / scale).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_position_returns_values() {
        // T=1: softmax over one key, so the output is v through the head map.
        let (b, t, h, n_kv, dh) = (2, 1, 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_vec(&mut rng, b * t * h * dh);
        let k = rand_vec(&mut rng, b * t * n_kv * dh);
        let v = rand_vec(&mut rng, b * t * n_kv * dh);
        let mut tr = Trace::<f64>::new();
        let qi = tr.constant(q, vec![b, t, h, dh]).unwrap();
        let ki = tr.constant(k, vec![b, t, n_kv, dh]).unwrap();
        let vi = tr.constant(v.clone(), vec![b, t, n_kv, dh]).unwrap();
        let y = tr_attention(&mut tr, qi, ki, vi);
        let got = tr.values(y);
        let group = h / n_kv;
        for bb in 0..b {
            for hh in 0..h {
                let g = hh / group;
                for r in 0..dh {
                    let want = v[(bb * n_kv + g) * dh + r];
                    let got_v = got[bb * h * dh + hh * dh + r];
                    assert!((got_v - want).abs() < 1e-12);
                }
            }
        }
    }

    fn tr_attention(
        tr: &mut Trace<f64>,
        q: TensorId,
        k: TensorId,
        v: TensorId,
    ) -> TensorId {
        causal_attention(tr, q, k, v).unwrap()
    }

    #[test]
    fn attention_uniform_when_keys_constant() {
        // Constant keys make every admissible score equal, so position t
        // averages values over positions <= t.
        let (b, t, h, n_kv, dh) = (1, 4, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = rand_vec(&mut rng, b * t * h * dh);
        let k = vec![0.4; b * t * n_kv * dh];
        let v = rand_vec(&mut rng, b * t * n_kv * dh);
        let mut tr = Trace::<f64>::new();
        let qi = tr.constant(q, vec![b, t, h, dh]).unwrap();
        let ki = tr.constant(k, vec![b, t, n_kv, dh]).unwrap();
        let vi = tr.constant(v.clone(), vec![b, t, n_kv, dh]).unwrap();
        let y = tr_attention(&mut tr, qi, ki, vi);
        let got = tr.values(y);
        for tt in 0..t {
            for hh in 0..h {
                let g = hh / (h / n_kv);
                for r in 0..dh {
                    let mean: f64 = (0..=tt)
                        .map(|p| v[(p * n_kv + g) * dh + r])
                        .sum::<f64>()
                        / (tt + 1) as f64;
                    let got_v = got[tt * h * dh + hh * dh + r];
                    assert!((got_v - mean).abs() < 1e-12, "t={tt} h={hh} r={r}");
                }
            }
        }
    }

    /// Dense reference: materializes the masked score matrix per query head
    /// with explicitly repeated KV heads. Independent of the traced path.
    fn reference_attention(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        b: usize,
        t: usize,
        h: usize,
        n_kv: usize,
        dh: usize,
    ) -> Vec<f64> {
        let group = h / n_kv;
        let mut out = vec![0.0; b * t * h * dh];
        for bb in 0..b {
            for hh in 0..h {
                let g = hh / group;
                for ti in 0..t {
                    let qrow: Vec<f64> = (0..dh)
                        .map(|r| q[((bb * t + ti) * h + hh) * dh + r])
                        .collect();
                    let mut scores = vec![f64::NEG_INFINITY; t];
                    for tj in 0..=ti {
                        let mut s = 0.0;
                        for r in 0..dh {
                            s += qrow[r] * k[((bb * t + tj) * n_kv + g) * dh + r];
                        }
                        scores[tj] = s / (dh as f64).sqrt();
                    }
                    let mx = scores[..=ti].iter().cloned().fold(f64::MIN, f64::max);
                    let mut weights = vec![0.0; t];
                    let mut sum = 0.0;
                    for tj in 0..=ti {
                        weights[tj] = (scores[tj] - mx).exp();
                        sum += weights[tj];
                    }
                    for w in weights.iter_mut() {
                        *w /= sum;
                    }
                    for r in 0..dh {
                        let mut acc = 0.0;
                        for tj in 0..=ti {
                            acc += weights[tj] * v[((bb * t + tj) * n_kv + g) * dh + r];
                        }
                        out[((bb * t + ti) * h + hh) * dh + r] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_reference() {
        let (b, t, h, n_kv, dh) = (2, 3, 4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = rand_vec(&mut rng, b * t * h * dh);
        let k = rand_vec(&mut rng, b * t * n_kv * dh);
        let v = rand_vec(&mut rng, b * t * n_kv * dh);
        let mut tr = Trace::<f64>::new();
        let qi = tr.constant(q.clone(), vec![b, t, h, dh]).unwrap();
        let ki = tr.constant(k.clone(), vec![b, t, n_kv, dh]).unwrap();
        let vi = tr.constant(v.clone(), vec![b, t, n_kv, dh]).unwrap();
        let y = tr_attention(&mut tr, qi, ki, vi);
        let want = reference_attention(&q, &k, &v, b, t, h, n_kv, dh);
        assert!(max_abs_diff(tr.values(y), &want) < 1e-12);
    }

    #[test]
    fn gqa_equals_explicitly_repeated_kv() {
        // n_kv < n_heads must equal plain attention with repeated KV heads.
        let (b, t, h, n_kv, dh) = (1, 4, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = rand_vec(&mut rng, b * t * h * dh);
        let k = rand_vec(&mut rng, b * t * n_kv * dh);
        let v = rand_vec(&mut rng, b * t * n_kv * dh);
        let group = h / n_kv;
        let repeat = |x: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(b * t * h * dh);
            for bt in 0..b * t {
                for g in 0..n_kv {
                    for _ in 0..group {
                        out.extend_from_slice(&x[(bt * n_kv + g) * dh..(bt * n_kv + g + 1) * dh]);
                    }
                }
            }
            out
        };
        // Repeat produces head order [g0, g0, g1, g1]; the grouped layout
        // maps query head hh to group hh / group, which matches.
        let mut tr = Trace::<f64>::new();
        let qi = tr.constant(q.clone(), vec![b, t, h, dh]).unwrap();
        let ki = tr.constant(k.clone(), vec![b, t, n_kv, dh]).unwrap();
        let vi = tr.constant(v.clone(), vec![b, t, n_kv, dh]).unwrap();
        let grouped = tr_attention(&mut tr, qi, ki, vi);

        let kr = repeat(&k);
        let vr = repeat(&v);
        let ki2 = tr.constant(kr, vec![b, t, h, dh]).unwrap();
        let vi2 = tr.constant(vr, vec![b, t, h, dh]).unwrap();
        let full = tr_attention(&mut tr, qi, ki2, vi2);
        assert!(max_abs_diff(tr.values(grouped), tr.values(full)) < 1e-6);
    }

    #[test]
    fn attention_rejects_bad_head_split() {
        let mut tr = Trace::<f64>::new();
        let q = tr.constant(vec![0.0; 1 * 2 * 3 * 2], vec![1, 2, 3, 2]).unwrap();
        let k = tr.constant(vec![0.0; 1 * 2 * 2 * 2], vec![1, 2, 2, 2]).unwrap();
        let err = causal_attention(&mut tr, q, k, k).unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn attention_is_causal_under_perturbation() {
        let (b, t, h, n_kv, dh) = (1, 6, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = rand_vec(&mut rng, b * t * h * dh);
        let k = rand_vec(&mut rng, b * t * n_kv * dh);
        let v = rand_vec(&mut rng, b * t * n_kv * dh);
        let run = |q: &[f64], k: &[f64], v: &[f64]| {
            let mut tr = Trace::<f64>::new();
            let qi = tr.constant(q.to_vec(), vec![b, t, h, dh]).unwrap();
            let ki = tr.constant(k.to_vec(), vec![b, t, n_kv, dh]).unwrap();
            let vi = tr.constant(v.to_vec(), vec![b, t, n_kv, dh]).unwrap();
            let y = causal_attention(&mut tr, qi, ki, vi).unwrap();
            tr.values(y).to_vec()
        };
        let base = run(&q, &k, &v);
        let pos = 3;
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for r in 0..n_kv * dh {
            k2[pos * n_kv * dh + r] += 0.5;
            v2[pos * n_kv * dh + r] -= 0.25;
        }
        let poked = run(&q, &k2, &v2);
        let width = h * dh;
        for tt in 0..pos {
            for r in 0..width {
                assert_eq!(
                    base[tt * width + r],
                    poked[tt * width + r],
                    "position {tt} saw a future perturbation"
                );
            }
        }
        assert!(
            (0..width).any(|r| base[pos * width + r] != poked[pos * width + r]),
            "perturbation had no effect at its own position"
        );
    }

    #[test]
    fn gate_gradients_flow() {
        // Gradient through the full gate + mix path, against the oracle.
        use crate::gradcheck::grad_check;
        let (b, t, d, n_kv, dh) = (1, 2, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_vec(&mut rng, b * t * d);
        let vn = rand_vec(&mut rng, b * t * n_kv * dh);
        let v1 = rand_vec(&mut rng, b * t * n_kv * dh);
        let w = rand_vec(&mut rng, b * t * n_kv * dh);
        for spec in GateSpec::ALL {
            let eval = |ps: &[Vec<f64>]| -> crate::error::Result<f64> {
                let mut tr = Trace::<f64>::new();
                let xn = tr.constant(x.clone(), vec![b, t, d])?;
                let wa = tr.leaf(ps[0].clone(), vec![d, n_kv], true)?;
                let vni = tr.constant(vn.clone(), vec![b, t, n_kv, dh])?;
                let v1i = tr.constant(v1.clone(), vec![b, t, n_kv, dh])?;
                let alpha = compute_gate(&mut tr, xn, wa, spec)?;
                let mixed = mix_values_sat(&mut tr, vni, v1i, alpha)?;
                let wc = tr.constant(w.clone(), vec![b, t, n_kv, dh])?;
                let yw = tr.mul(mixed, wc)?;
                let loss = tr.sum_all(yw)?;
                Ok(tr.read_scalar(loss))
            };
            // Bias the projection away from relu kinks.
            let wa: Vec<f64> = (0..d * n_kv).map(|_| rng.gen_range(0.3..1.0)).collect();
            let analytic = {
                let mut tr = Trace::<f64>::new();
                let xn = tr.constant(x.clone(), vec![b, t, d]).unwrap();
                let wa_id = tr.leaf(wa.clone(), vec![d, n_kv], true).unwrap();
                let vni = tr.constant(vn.clone(), vec![b, t, n_kv, dh]).unwrap();
                let v1i = tr.constant(v1.clone(), vec![b, t, n_kv, dh]).unwrap();
                let alpha = compute_gate(&mut tr, xn, wa_id, spec).unwrap();
                let mixed = mix_values_sat(&mut tr, vni, v1i, alpha).unwrap();
                let wc = tr.constant(w.clone(), vec![b, t, n_kv, dh]).unwrap();
                let yw = tr.mul(mixed, wc).unwrap();
                let loss = tr.sum_all(yw).unwrap();
                tr.backward(loss).unwrap();
                vec![tr.grad(wa_id).unwrap().to_vec()]
            };
            let r = grad_check(eval, &[wa], &analytic, 1e-5, 0, &[0], 15).unwrap();
            assert!(r.max_rel_err < 1e-6, "{spec}: {r:?}");
        }
    }
}
