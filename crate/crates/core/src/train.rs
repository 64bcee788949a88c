//! Desk-scale causal-LM training: seeded batching with a held-out validation
//! tail, decoupled-weight-decay Adam, warmup+cosine schedule, global-norm
//! clipping, and deterministic metrics/checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dtype::Element;
use crate::error::{Error, Result};
use crate::model::{
    build_model, collect_grads, forward_pass, ForwardOptions, ModelConfig, ModelWeights,
};

fn default_warmup_fraction() -> f64 {
    0.01
}
fn default_min_lr_ratio() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Training hyperparameters. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub corpus_path: String,
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_lr > 0.0) {
            problems.push("base_lr must be positive".to_string());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            problems.push(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            ));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            problems.push(format!("min_lr_ratio {} outside (0, 1]", self.min_lr_ratio));
        }
        if !(self.clip_norm > 0.0) {
            problems.push("clip_norm must be positive".to_string());
        }
        for (field, v) in [
            ("total_steps", self.total_steps),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.total_steps > 0 && self.warmup_steps() >= self.total_steps {
            problems.push(format!(
                "warmup covers {} of {} steps; nothing left for the decay phase",
                self.warmup_steps(),
                self.total_steps
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Learning rate at `step` in `[0, total_steps]`: linear `0 -> base_lr` over
/// the warmup steps, then cosine decay to `min_lr_ratio * base_lr`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "lr_at: step {step} out of range 0..={}",
            cfg.total_steps
        )));
    }
    let warmup = cfg.warmup_steps();
    if step <= warmup {
        return Ok(cfg.base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (cfg.total_steps - warmup) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine))
}

/// First/second moment accumulators, aligned with the canonical parameter
/// order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let mut m = Vec::new();
        weights.for_each_param(|_, data| m.push(vec![T::zero(); data.len()]));
        let v = m.clone();
        OptimizerState { step: 0, m, v }
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `theta <- theta * (1 - lr * wd)` (decayed tensors only), then
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Element>(
    weights: &mut ModelWeights<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::invalid("adamw_step: negative learning rate"));
    }
    let n_params = state.m.len();
    if grads.len() != n_params {
        return Err(Error::invalid(format!(
            "adamw_step: {} gradient tensors for {} parameters",
            grads.len(),
            n_params
        )));
    }
    // Abort before touching any parameter if a gradient is non-finite.
    let names: Vec<String> = weights.param_metas().into_iter().map(|m| m.name).collect();
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "adamw_step aborted: gradient for {} contains NaN/Inf",
                names.get(i).map(String::as_str).unwrap_or("?")
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.adam_beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.adam_beta2);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let decay_factor = T::from_f64(1.0 - lr * cfg.weight_decay);

    let mut idx = 0;
    let (ms, vs) = (&mut state.m, &mut state.v);
    weights.for_each_param_mut(|meta, data| {
        let g = &grads[idx];
        let m = &mut ms[idx];
        let v = &mut vs[idx];
        for j in 0..data.len() {
            m[j] = b1 * m[j] + one_m_b1 * g[j];
            v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
            if meta.decay {
                data[j] *= decay_factor;
            }
            let m_hat = m[j] * inv_bc1;
            let v_hat_sqrt = (v[j]).sqrt() * inv_bc2_sqrt;
            data[j] -= lr_t * m_hat / (v_hat_sqrt + eps);
        }
        idx += 1;
    });
    Ok(())
}

/// Global L2 norm over every gradient tensor, accumulated in f64.
pub fn global_grad_norm<T: Element>(grads: &[Vec<T>]) -> f64 {
    let mut ss = 0.0f64;
    for g in grads {
        for &v in g {
            let x = v.to_f64();
            ss += x * x;
        }
    }
    ss.sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the factor applied (1.0 when unchanged).
pub fn clip_global_norm<T: Element>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = global_grad_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    let f = T::from_f64(factor);
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= f;
        }
    }
    factor
}

/// Seeded sampler of `(inputs, targets)` windows over a byte corpus. The
/// final tail fraction is held out for validation and never sampled for
/// training. Batches are a pure function of `(seed, step)`, so a resumed run
/// sees exactly the data an unbroken run would.
pub struct BatchStream<'c> {
    corpus: &'c [u8],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    train_limit: usize,
}

/// Fraction of the corpus tail reserved for validation.
pub const VALIDATION_FRACTION: f64 = 0.05;

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c [u8], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if corpus.len() <= seq_len + 1 {
            return Err(Error::invalid(format!(
                "corpus of {} bytes is too short for seq_len {}",
                corpus.len(),
                seq_len
            )));
        }
        let val_len = ((corpus.len() as f64) * VALIDATION_FRACTION) as usize;
        let train_limit = corpus.len() - val_len;
        if train_limit < seq_len + 1 {
            return Err(Error::invalid(format!(
                "corpus of {} bytes leaves no training window of {} after the validation holdout",
                corpus.len(),
                seq_len
            )));
        }
        Ok(BatchStream {
            corpus,
            seq_len,
            batch_size,
            seed,
            train_limit,
        })
    }

    /// Largest admissible window offset; windows span `seq_len + 1` bytes.
    pub fn max_offset(&self) -> usize {
        self.train_limit - self.seq_len - 1
    }

    /// Bytes reserved for validation.
    pub fn validation_tokens(&self) -> &'c [u8] {
        &self.corpus[self.train_limit..]
    }

    /// The batch for `step`: inputs and next-byte targets, each
    /// `batch_size * seq_len`, flattened row-major.
    pub fn batch(&self, step: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (step as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(0xD1B5_4A32_D192_ED03),
        );
        let mut inputs = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seq_len);
        for _ in 0..self.batch_size {
            let off = rng.gen_range(0..=self.max_offset());
            let window = &self.corpus[off..off + self.seq_len + 1];
            inputs.extend(window[..self.seq_len].iter().map(|&b| b as usize));
            targets.extend(window[1..].iter().map(|&b| b as usize));
        }
        (inputs, targets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Consecutive non-overlapping evaluation windows over `data`, grouped into
/// batches: `(inputs, targets, rows)` with `rows <= batch_size`.
pub fn eval_batches(
    data: &[u8],
    seq_len: usize,
    batch_size: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>, usize)>> {
    if data.len() < seq_len + 1 {
        return Err(Error::invalid(format!(
            "evaluation data of {} bytes is shorter than one {}-token window",
            data.len(),
            seq_len
        )));
    }
    let windows = (data.len() - 1) / seq_len;
    let mut out = Vec::new();
    let mut w = 0;
    while w < windows {
        let rows = batch_size.min(windows - w);
        let mut inputs = Vec::with_capacity(rows * seq_len);
        let mut targets = Vec::with_capacity(rows * seq_len);
        for r in 0..rows {
            let off = (w + r) * seq_len;
            let window = &data[off..off + seq_len + 1];
            inputs.extend(window[..seq_len].iter().map(|&b| b as usize));
            targets.extend(window[1..].iter().map(|&b| b as usize));
        }
        out.push((inputs, targets, rows));
        w += rows;
    }
    Ok(out)
}

/// Token-weighted mean cross-entropy over `data`, with a forward-pass
/// override hook for interventions. Accumulation is in f64, so the result
/// does not depend on how windows are grouped into batches.
pub fn evaluate_with_options<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    let mut loss_sum = 0.0f64;
    let mut tokens = 0usize;
    for (inputs, targets, rows) in eval_batches(data, seq_len, batch_size)? {
        let mut pass = forward_pass(weights, &inputs, rows, seq_len, opts)?;
        let loss_id = pass.trace.cross_entropy_mean(pass.logits, &targets)?;
        let loss = pass.trace.read_scalar(loss_id).to_f64();
        loss_sum += loss * (rows * seq_len) as f64;
        tokens += rows * seq_len;
    }
    let loss = loss_sum / tokens as f64;
    Ok(EvalReport {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}

/// Mean token-level cross-entropy and `exp(loss)` perplexity over `data`.
pub fn evaluate_perplexity<T: Element>(
    weights: &ModelWeights<T>,
    data: &[u8],
    batch_size: usize,
    seq_len: usize,
) -> Result<EvalReport> {
    evaluate_with_options(weights, data, batch_size, seq_len, &ForwardOptions::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,grad_norm,val_loss";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.train_loss, self.grad_norm, val
        )
    }

    pub fn from_csv_line(line: &str) -> Result<MetricsRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::invalid(format!("metrics row needs 5 fields: {line:?}")));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("metrics row: bad {what} {s:?}")))
        };
        Ok(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| Error::invalid(format!("metrics row: bad step {:?}", fields[0])))?,
            lr: parse(fields[1], "lr")?,
            train_loss: parse(fields[2], "train_loss")?,
            grad_norm: parse(fields[3], "grad_norm")?,
            val_loss: if fields[4].is_empty() {
                None
            } else {
                Some(parse(fields[4], "val_loss")?)
            },
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == METRICS_HEADER => {}
            other => {
                return Err(Error::invalid(format!("metrics csv: unexpected header {other:?}")))
            }
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(MetricsRow::from_csv_line)
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsLog { rows })
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_loss)
    }
}

pub struct TrainOutcome<T> {
    pub weights: ModelWeights<T>,
    pub state: OptimizerState<T>,
    pub metrics: MetricsLog,
    /// Steps completed over the model's lifetime (not just this session).
    pub step: usize,
}

/// One training session. `stop_after` ends the session early (the schedule
/// still spans `total_steps`), which together with `resume_from` lets a run
/// be split across sessions without perturbing it.
pub struct TrainSession<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub run_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    pub stop_after: Option<usize>,
}

impl<'a> TrainSession<'a> {
    pub fn new(model: &'a ModelConfig, train: &'a TrainConfig) -> Self {
        TrainSession {
            model,
            train,
            run_dir: None,
            resume_from: None,
            stop_after: None,
        }
    }

    pub fn run<T: Element>(&self) -> Result<TrainOutcome<T>> {
        self.model.validate()?;
        self.train.validate()?;
        let cfg = self.train;
        let corpus = fs::read(&cfg.corpus_path)?;
        let stream = BatchStream::new(&corpus, cfg.seq_len, cfg.batch_size, cfg.seed)?;

        let (mut weights, mut state, start_step) = match self.resume_from {
            Some(path) => {
                let ck = crate::checkpoint::Checkpoint::<T>::load(path)?;
                if ck.weights.config != self.model.resolved() {
                    return Err(Error::InvalidConfig(
                        "resume checkpoint was trained with a different model config".into(),
                    ));
                }
                let state = ck.state.ok_or_else(|| {
                    Error::Integrity("resume checkpoint carries no optimizer state".into())
                })?;
                (ck.weights, state, ck.step)
            }
            None => {
                let weights = build_model::<T>(self.model, self.model.seed)?;
                let state = OptimizerState::new(&weights);
                (weights, state, 0)
            }
        };

        let end = self
            .stop_after
            .map(|s| s.min(cfg.total_steps))
            .unwrap_or(cfg.total_steps);
        if let Some(dir) = self.run_dir {
            fs::create_dir_all(dir)?;
        }
        let mut csv = match self.run_dir {
            Some(dir) => {
                let mut f = fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };

        let mut metrics = MetricsLog::default();
        let opts = ForwardOptions {
            requires_grad: true,
            ..Default::default()
        };
        for step in start_step..end {
            let (inputs, targets) = stream.batch(step);
            let mut pass = forward_pass(&weights, &inputs, cfg.batch_size, cfg.seq_len, &opts)?;
            let loss_id = pass.trace.cross_entropy_mean(pass.logits, &targets)?;
            let train_loss = pass.trace.read_scalar(loss_id).to_f64();
            if !train_loss.is_finite() {
                // Checkpoints written at earlier eval points stay on disk.
                return Err(Error::Diverged {
                    step,
                    what: format!("train loss is {train_loss}"),
                });
            }
            pass.trace.backward(loss_id)?;
            let mut grads = collect_grads(&pass)?;
            drop(pass);
            let grad_norm = global_grad_norm(&grads);
            clip_global_norm::<T>(&mut grads, cfg.clip_norm);
            let lr = lr_at(step + 1, cfg)?;
            adamw_step(&mut weights, &grads, &mut state, lr, cfg)?;

            let done = step + 1;
            let at_eval = done % cfg.eval_interval == 0 || done == end;
            let val_loss = if at_eval {
                Some(
                    evaluate_perplexity(&weights, stream.validation_tokens(), cfg.batch_size, cfg.seq_len)?
                        .loss,
                )
            } else {
                None
            };
            let row = MetricsRow {
                step,
                lr,
                train_loss,
                grad_norm,
                val_loss,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.to_csv_line())?;
            }
            metrics.rows.push(row);

            if at_eval {
                if let Some(dir) = self.run_dir {
                    let meta = serde_json::json!({
                        "train_loss": train_loss,
                        "val_loss": val_loss,
                        "seq_len": cfg.seq_len,
                    });
                    save_checkpoint(
                        &dir.join(format!("checkpoint_{done:06}.ckpt")),
                        &weights,
                        Some(&state),
                        done,
                        &meta,
                    )?;
                }
            }
        }
        if let Some(f) = csv.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = self.run_dir {
            let last = dir.join(format!("checkpoint_{end:06}.ckpt"));
            if last.exists() {
                fs::copy(&last, dir.join("final.ckpt"))?;
            }
        }
        Ok(TrainOutcome {
            weights,
            state,
            metrics,
            step: end,
        })
    }
}

/// Convenience wrapper over one full [`TrainSession`].
pub fn train<T: Element>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    TrainSession {
        model: model_cfg,
        train: train_cfg,
        run_dir,
        resume_from: None,
        stop_after: None,
    }
    .run()
}
