//! Mechanistic analysis toolkit: gate statistics, gate interventions,
//! layer-decoding perplexity curves, and the gate-variant training sweep.
//! Every op here is read-only over the model weights.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::attention::GateSpec;
use crate::dtype::Element;
use crate::error::{Error, Result};
use crate::model::{
    forward_pass, Diagnostics, ForwardOptions, GateOverride, ModelConfig, ModelWeights, Variant,
    RMS_EPS,
};
use crate::train::{eval_batches, evaluate_with_options, MetricsLog, TrainConfig, TrainSession};

/// Aggregated gate activations over an evaluation set.
#[derive(Clone, Debug, Serialize)]
pub struct GateStats {
    /// Mean gate activation per (mixing layer, KV head); row 0 is layer 2.
    pub mean_alpha: Vec<Vec<f64>>,
    /// Fraction of exactly-zero activations per mixing layer. Bit-level
    /// zeros: meaningful for gates that can reach zero (relu), always 0 for
    /// sigmoid/softmax-family gates.
    pub sparsity: Vec<f64>,
    /// Std/mean of per-head means within a layer (population std, mean
    /// floored at 1e-8).
    pub head_cv: Vec<f64>,
    pub layers: usize,
    pub n_kv: usize,
}

impl GateStats {
    /// Row-major heatmap matrix with layer/head labels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for j in 0..self.n_kv {
            s.push_str(&format!(",head_{j}"));
        }
        s.push_str(",sparsity,head_cv\n");
        for (i, row) in self.mean_alpha.iter().enumerate() {
            s.push_str(&format!("{}", i + 2));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{},{}\n", self.sparsity[i], self.head_cv[i]));
        }
        s
    }
}

/// Exact aggregation of captured gate activations (no sampling).
pub fn gate_stats<T: Element>(diags: &[Diagnostics<T>]) -> Result<GateStats> {
    let first = diags
        .first()
        .ok_or_else(|| Error::invalid("gate_stats: no diagnostics supplied"))?;
    if first.alpha.is_empty() {
        return Err(Error::invalid(
            "gate_stats: diagnostics carry no gate activations (not a gated model?)",
        ));
    }
    let mixing_layers = first.alpha.len();
    let n_kv = first.alpha_dims.2;
    let mut sums = vec![vec![0.0f64; n_kv]; mixing_layers];
    let mut zeros = vec![0usize; mixing_layers];
    let mut counts = vec![0usize; mixing_layers];
    for d in diags {
        if d.alpha.len() != mixing_layers || d.alpha_dims.2 != n_kv {
            return Err(Error::invalid("gate_stats: diagnostics batches disagree on shape"));
        }
        for (l, alpha) in d.alpha.iter().enumerate() {
            for (i, &a) in alpha.iter().enumerate() {
                let head = i % n_kv;
                let x = a.to_f64();
                sums[l][head] += x;
                if x == 0.0 {
                    zeros[l] += 1;
                }
            }
            counts[l] += alpha.len();
        }
    }
    let mut mean_alpha = Vec::with_capacity(mixing_layers);
    let mut sparsity = Vec::with_capacity(mixing_layers);
    let mut head_cv = Vec::with_capacity(mixing_layers);
    for l in 0..mixing_layers {
        let per_head_count = (counts[l] / n_kv) as f64;
        let means: Vec<f64> = sums[l].iter().map(|s| s / per_head_count).collect();
        let mean_of_means = means.iter().sum::<f64>() / n_kv as f64;
        let var = means
            .iter()
            .map(|m| (m - mean_of_means) * (m - mean_of_means))
            .sum::<f64>()
            / n_kv as f64;
        head_cv.push(var.sqrt() / mean_of_means.max(1e-8));
        sparsity.push(zeros[l] as f64 / counts[l] as f64);
        mean_alpha.push(means);
    }
    Ok(GateStats {
        mean_alpha,
        sparsity,
        head_cv,
        layers: mixing_layers + 1,
        n_kv,
    })
}

/// Collects diagnostics over every evaluation batch of `data`.
pub fn capture_diagnostics<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
) -> Result<Vec<Diagnostics<T>>> {
    let opts = ForwardOptions {
        capture: true,
        ..Default::default()
    };
    let mut out = Vec::new();
    for (inputs, _targets, rows) in eval_batches(data, seq_len, batch_size)? {
        let pass = forward_pass(weights, &inputs, rows, seq_len, &opts)?;
        out.push(pass.diagnostics.expect("capture requested"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterventionMode {
    /// Force the gate to zero at the target layer (pathway removed).
    Zero,
    /// Replace every gate value at the target layer with the scalar mean of
    /// that layer's gate over the same evaluation data (input dependence
    /// removed, average scale preserved).
    Mean,
}

fn check_sat(config: &ModelConfig, what: &str) -> Result<()> {
    if config.variant != Variant::Satformer {
        return Err(Error::invalid(format!(
            "{what}: requires the gated variant, got {}",
            config.variant
        )));
    }
    Ok(())
}

/// Mean gate activation at one mixing layer over `data` (first pass of the
/// mean-replacement intervention).
pub fn layer_gate_mean<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
    layer: usize,
) -> Result<f64> {
    check_sat(&weights.config, "layer_gate_mean")?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for d in capture_diagnostics(weights, data, batch_size, seq_len)? {
        let alpha = &d.alpha[layer - 2];
        sum += alpha.iter().map(|a| a.to_f64()).sum::<f64>();
        count += alpha.len();
    }
    Ok(sum / count as f64)
}

/// Perplexity under a single-layer gate intervention; all other layers run
/// untouched.
pub fn intervene<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
    layer: usize,
    mode: InterventionMode,
) -> Result<f64> {
    check_sat(&weights.config, "intervene")?;
    if !(2..=weights.config.layers).contains(&layer) {
        return Err(Error::invalid(format!(
            "intervene: layer {layer} outside 2..={}",
            weights.config.layers
        )));
    }
    let value = match mode {
        InterventionMode::Zero => 0.0,
        InterventionMode::Mean => layer_gate_mean(weights, data, batch_size, seq_len, layer)?,
    };
    let opts = ForwardOptions {
        gate_override: Some(GateOverride {
            layer: Some(layer),
            value,
        }),
        ..Default::default()
    };
    Ok(evaluate_with_options(weights, data, batch_size, seq_len, &opts)?.perplexity)
}

#[derive(Clone, Debug, Serialize)]
pub struct InterventionRow {
    pub layer: usize,
    pub zero_ppl: f64,
    pub zero_delta: f64,
    pub mean_ppl: f64,
    pub mean_delta: f64,
    pub gate_mean: f64,
}

/// Per-layer zero/mean intervention deltas against the unablated baseline,
/// all computed on identical data and weights.
#[derive(Clone, Debug, Serialize)]
pub struct InterventionReport {
    pub baseline_ppl: f64,
    pub rows: Vec<InterventionRow>,
}

impl InterventionReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("layer,baseline_ppl,zero_ppl,zero_delta,mean_ppl,mean_delta,gate_mean\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.layer, self.baseline_ppl, r.zero_ppl, r.zero_delta, r.mean_ppl, r.mean_delta, r.gate_mean
            ));
        }
        s
    }
}

pub fn intervention_report<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
) -> Result<InterventionReport> {
    check_sat(&weights.config, "intervention_report")?;
    let baseline =
        evaluate_with_options(weights, data, batch_size, seq_len, &ForwardOptions::default())?
            .perplexity;
    let mut rows = Vec::new();
    for layer in 2..=weights.config.layers {
        let gate_mean = layer_gate_mean(weights, data, batch_size, seq_len, layer)?;
        let zero_ppl = intervene(weights, data, batch_size, seq_len, layer, InterventionMode::Zero)?;
        let mean_opts = ForwardOptions {
            gate_override: Some(GateOverride {
                layer: Some(layer),
                value: gate_mean,
            }),
            ..Default::default()
        };
        let mean_ppl =
            evaluate_with_options(weights, data, batch_size, seq_len, &mean_opts)?.perplexity;
        rows.push(InterventionRow {
            layer,
            zero_ppl,
            zero_delta: zero_ppl - baseline,
            mean_ppl,
            mean_delta: mean_ppl - baseline,
            gate_mean,
        });
    }
    Ok(InterventionReport {
        baseline_ppl: baseline,
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LensRow {
    pub layer: usize,
    pub loss: f64,
    pub perplexity: f64,
}

/// Per-layer perplexity from decoding each intermediate hidden state through
/// the final norm and unembedding. Layer 0 is the embedding output; layer L
/// reproduces the model's own perplexity.
#[derive(Clone, Debug, Serialize)]
pub struct LogitLensReport {
    pub rows: Vec<LensRow>,
}

impl LogitLensReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,loss,perplexity\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.layer, r.loss, r.perplexity));
        }
        s
    }

    /// Paired curves for two checkpoints (crossover plots).
    pub fn comparison_csv(a: (&str, &LogitLensReport), b: (&str, &LogitLensReport)) -> String {
        let mut s = String::from("model,layer,loss,perplexity\n");
        for (label, report) in [a, b] {
            for r in &report.rows {
                s.push_str(&format!("{},{},{},{}\n", label, r.layer, r.loss, r.perplexity));
            }
        }
        s
    }
}

pub fn logit_lens<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
) -> Result<LogitLensReport> {
    let layers = weights.config.layers;
    let mut loss_sums = vec![0.0f64; layers + 1];
    let mut tokens = 0usize;
    let opts = ForwardOptions {
        capture: true,
        ..Default::default()
    };
    for (inputs, targets, rows) in eval_batches(data, seq_len, batch_size)? {
        let mut pass = forward_pass(weights, &inputs, rows, seq_len, &opts)?;
        let unembed = match pass.staged.unembedding {
            Some(u) => u,
            None => pass.trace.permute(pass.staged.embedding, &[1, 0])?,
        };
        let final_norm = pass.staged.final_norm;
        for (l, &hid) in pass.hidden_ids.clone().iter().enumerate() {
            let xn = pass.trace.rms_norm(hid, final_norm, RMS_EPS)?;
            let logits = pass.trace.matmul(xn, unembed)?;
            let loss_id = pass.trace.cross_entropy_mean(logits, &targets)?;
            loss_sums[l] += pass.trace.read_scalar(loss_id).to_f64() * (rows * seq_len) as f64;
        }
        tokens += rows * seq_len;
    }
    let rows = loss_sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| {
            let loss = s / tokens as f64;
            LensRow {
                layer,
                loss,
                perplexity: loss.exp(),
            }
        })
        .collect();
    Ok(LogitLensReport { rows })
}

/// One trained cell of the gate-variant sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub gate: GateSpec,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// True when the cell was reconstructed from an earlier run's metrics
    /// instead of being retrained.
    pub reused: bool,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub steps: usize,
}

impl SweepTable {
    /// Loss curves aligned on the step index, one column per cell.
    pub fn aligned_csv(&self) -> String {
        let mut s = String::from("step");
        for c in &self.cells {
            s.push_str(&format!(",{}_s{}", c.gate, c.seed));
        }
        s.push('\n');
        for step in 0..self.steps {
            s.push_str(&step.to_string());
            for c in &self.cells {
                s.push_str(&format!(",{}", c.losses[step]));
            }
            s.push('\n');
        }
        s
    }

    /// Final losses sorted ascending, ties broken by gate name then seed.
    pub fn summary(&self) -> Vec<(GateSpec, u64, f64)> {
        let mut rows: Vec<(GateSpec, u64, f64)> = self
            .cells
            .iter()
            .map(|c| (c.gate, c.seed, c.final_loss))
            .collect();
        rows.sort_by(|a, b| {
            a.2.partial_cmp(&b.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.name().cmp(b.0.name()))
                .then_with(|| a.1.cmp(&b.1))
        });
        rows
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("gate_spec,seed,final_loss\n");
        for (gate, seed, loss) in self.summary() {
            s.push_str(&format!("{gate},{seed},{loss}\n"));
        }
        s
    }
}

/// Trains one gated model per (gate variant, seed) under identical data
/// order and emits aligned per-step loss curves. When `run_root` is given,
/// cells whose metrics are already complete on disk are reused, which makes
/// an interrupted sweep resumable.
pub fn ablation_sweep<T: Element>(
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[GateSpec],
    seeds: &[u64],
    run_root: Option<&Path>,
) -> Result<SweepTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one gate variant and one seed".into()));
    }
    let mut cells = Vec::new();
    for &gate in variants {
        for &seed in seeds {
            let mut model = base_model.clone();
            model.variant = Variant::Satformer;
            model.gate_spec = gate;
            model.seed = seed;
            let cell_dir = run_root.map(|r| r.join(format!("{}_s{}", gate, seed)));
            if let Some(dir) = &cell_dir {
                if let Some(cell) = try_reuse_cell(dir, gate, seed, train_cfg.total_steps)? {
                    cells.push(cell);
                    continue;
                }
            }
            let outcome = TrainSession {
                model: &model,
                train: train_cfg,
                run_dir: cell_dir.as_deref(),
                resume_from: None,
                stop_after: None,
            }
            .run::<T>()?;
            let losses: Vec<f64> = outcome.metrics.rows.iter().map(|r| r.train_loss).collect();
            let final_loss = *losses.last().expect("at least one step");
            cells.push(SweepCell {
                gate,
                seed,
                losses,
                final_loss,
                reused: false,
            });
        }
    }
    Ok(SweepTable {
        cells,
        steps: train_cfg.total_steps,
    })
}

fn try_reuse_cell(
    dir: &Path,
    gate: GateSpec,
    seed: u64,
    total_steps: usize,
) -> Result<Option<SweepCell>> {
    let path = dir.join("metrics.csv");
    if !path.exists() {
        return Ok(None);
    }
    let log = match MetricsLog::from_csv(&fs::read_to_string(&path)?) {
        Ok(log) => log,
        Err(_) => return Ok(None),
    };
    if log.rows.len() != total_steps {
        return Ok(None);
    }
    let losses: Vec<f64> = log.rows.iter().map(|r| r.train_loss).collect();
    let final_loss = *losses.last().expect("nonempty");
    Ok(Some(SweepCell {
        gate,
        seed,
        losses,
        final_loss,
        reused: true,
    }))
}
