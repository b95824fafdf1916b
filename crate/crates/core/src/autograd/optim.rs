//! Plain SGD with decoupled-from-nothing weight decay and optional
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

fn default_clip() -> Option<f32> {
    Some(1.0)
}

/// Optimizer hyperparameters. The update is
/// `w <- w - lr * (g + weight_decay * w)`, with `g` first rescaled so the
/// global gradient norm is at most `grad_clip_norm`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: Option<f32>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.2,
            weight_decay: 1e-4,
            grad_clip_norm: default_clip(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip_norm must be > 0, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// A named set of trainable tensors, split by weight-decay policy:
/// weights and adapter factors decay, biases and norm gains never do.
#[derive(Default, Clone)]
pub struct ParamSet {
    pub decayed: Vec<(String, Tensor)>,
    pub plain: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn all(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.decayed.iter().chain(self.plain.iter())
    }

    pub fn len(&self) -> usize {
        self.decayed.len() + self.plain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for (_, t) in self.all() {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.all() {
            t.zero_grad();
        }
    }
}

/// One SGD step over the whole set. Every parameter must carry a gradient;
/// gradients are cleared afterwards.
pub fn sgd_step(params: &ParamSet, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    for (name, t) in params.all() {
        if t.grad().is_none() {
            return Err(Error::Contract(format!(
                "sgd_step: parameter '{name}' has no gradient"
            )));
        }
    }

    if let Some(clip) = cfg.grad_clip_norm {
        let mut sq = 0.0f64;
        for (_, t) in params.all() {
            let g = t.grad().expect("checked above");
            sq += g.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        }
        let norm = sq.sqrt();
        if norm > clip as f64 {
            let factor = (clip as f64 / norm) as f32;
            for (_, t) in params.all() {
                let mut g = t.grad().expect("checked above");
                for v in g.iter_mut() {
                    *v *= factor;
                }
                t.set_grad(Some(g));
            }
        }
    }

    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    for (_, t) in &params.decayed {
        let g = t.grad().expect("checked above");
        let mut w = t.data_mut();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= lr * (gi + wd * *wi);
        }
    }
    for (_, t) in &params.plain {
        let g = t.grad().expect("checked above");
        let mut w = t.data_mut();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= lr * gi;
        }
    }
    params.zero_grads();
    Ok(())
}
