//! Desk-scale language-modeling laboratory built around gated reuse of the
//! first layer's value projections.
//!
//! The crate provides, bottom-up:
//!
//! - [`trace`]: a recorded dense-tensor engine with exact reverse-mode
//!   gradients and [`gradcheck`] as its finite-difference oracle;
//! - [`attention`]: causal grouped-query attention with three value-mixing
//!   policies (none, layer-global scalars, per-token per-KV-head gate);
//! - [`model`]: the decoder-only LM assembly with diagnostics capture and
//!   parameter accounting;
//! - [`train`]: seeded byte-level training with warmup+cosine AdamW and
//!   deterministic checkpoints;
//! - [`analysis`]: gate statistics, gate interventions, layer-decoding
//!   perplexity curves, and the gate-variant sweep.
//!
//! Hot kernels are data-parallel via rayon under the default `parallel`
//! feature and fall back to sequential loops without it; results are
//! bit-identical either way.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dtype;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod par;
mod shape;
pub mod trace;
pub mod train;

pub use attention::{GateSpec, ResLambdas};
pub use dtype::{Dtype, Element};
pub use error::{Error, Result};
pub use model::{
    build_model, count_params, forward, forward_with_diagnostics, Diagnostics, ModelConfig,
    ModelWeights, Variant,
};
pub use trace::{TensorId, Trace};
pub use train::{evaluate_perplexity, lr_at, TrainConfig, TrainSession};
