//! Continual learning for a tiny transformer: per-dataset low-rank
//! adapters trained on a frozen knowledge base (factorization), with the
//! accumulated adapter deltas periodically averaged and merged back into
//! the base (centralization). Includes sequential/EMA-distillation/pooled
//! baselines, a synthetic code-switching benchmark generator, and an
//! evaluation harness producing forward/backward error matrices.

pub mod autograd;
pub mod baselines;
pub mod config;
pub mod continual;
pub mod error;
pub mod eval;
pub mod io;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod taskgen;

pub use error::{Error, Result};
