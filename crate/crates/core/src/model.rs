//! Tiny transformer encoder for per-position token transduction. The
//! parameter set doubles as the knowledge base that accumulates merged
//! adapter deltas across centralizations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{concat_cols, concat_rows, gather_rows, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::seed::rng_for;

pub const LN_EPS: f32 = 1e-5;

fn default_d_model() -> usize {
    64
}
fn default_n_layers() -> usize {
    2
}
fn default_n_heads() -> usize {
    2
}
fn default_d_ff() -> usize {
    128
}
fn default_max_seq_len() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_in: usize,
    pub vocab_out: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Learned absolute positional embeddings; disable to get a
    /// permutation-equivariant encoder.
    #[serde(default = "default_true")]
    pub use_positional: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_in", self.vocab_in),
            ("vocab_out", self.vocab_out),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// The full parameter set; versioned across centralizations.
pub struct KnowledgeBase {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    pub version: u32,
    names: Vec<LayerNames>,
}

#[derive(Clone)]
struct LayerNames {
    ln1_gain: String,
    ln1_bias: String,
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    ln2_gain: String,
    ln2_bias: String,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

fn layer_names(l: usize) -> LayerNames {
    LayerNames {
        ln1_gain: format!("layers.{l}.ln1.gain"),
        ln1_bias: format!("layers.{l}.ln1.bias"),
        wq: format!("layers.{l}.attn.wq"),
        wk: format!("layers.{l}.attn.wk"),
        wv: format!("layers.{l}.attn.wv"),
        wo: format!("layers.{l}.attn.wo"),
        ln2_gain: format!("layers.{l}.ln2.gain"),
        ln2_bias: format!("layers.{l}.ln2.bias"),
        w1: format!("layers.{l}.ffn.w1"),
        b1: format!("layers.{l}.ffn.b1"),
        w2: format!("layers.{l}.ffn.w2"),
        b2: format!("layers.{l}.ffn.b2"),
    }
}

/// Deterministic seeded initialization: scaled Gaussians for projection
/// weights and embeddings, zeros for biases, unit layer-norm gains. Each
/// parameter draws from its own name-labeled RNG stream.
pub fn init_model(cfg: &ModelConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut params = BTreeMap::new();

    let gauss = |name: &str, shape: &[usize], sigma: f32| -> Tensor {
        let mut rng = rng_for(cfg.seed, &format!("init/{name}"));
        Tensor::randn(shape, sigma, &mut rng)
    };
    let proj_sigma = 1.0 / (d as f32).sqrt();

    params.insert("embed.tok".into(), gauss("embed.tok", &[cfg.vocab_in, d], 0.02));
    params.insert("embed.pos".into(), gauss("embed.pos", &[cfg.max_seq_len, d], 0.02));
    for l in 0..cfg.n_layers {
        let n = layer_names(l);
        params.insert(n.ln1_gain.clone(), Tensor::full(&[d], 1.0));
        params.insert(n.ln1_bias.clone(), Tensor::zeros(&[d]));
        params.insert(n.wq.clone(), gauss(&n.wq, &[d, d], proj_sigma));
        params.insert(n.wk.clone(), gauss(&n.wk, &[d, d], proj_sigma));
        params.insert(n.wv.clone(), gauss(&n.wv, &[d, d], proj_sigma));
        params.insert(n.wo.clone(), gauss(&n.wo, &[d, d], proj_sigma));
        params.insert(n.ln2_gain.clone(), Tensor::full(&[d], 1.0));
        params.insert(n.ln2_bias.clone(), Tensor::zeros(&[d]));
        params.insert(n.w1.clone(), gauss(&n.w1, &[cfg.d_ff, d], proj_sigma));
        params.insert(n.b1.clone(), Tensor::zeros(&[cfg.d_ff]));
        params.insert(
            n.w2.clone(),
            gauss(&n.w2, &[d, cfg.d_ff], 1.0 / (cfg.d_ff as f32).sqrt()),
        );
        params.insert(n.b2.clone(), Tensor::zeros(&[d]));
    }
    params.insert("final_ln.gain".into(), Tensor::full(&[d], 1.0));
    params.insert("final_ln.bias".into(), Tensor::zeros(&[d]));
    params.insert("head.w".into(), gauss("head.w", &[cfg.vocab_out, d], proj_sigma));
    params.insert("head.b".into(), Tensor::zeros(&[cfg.vocab_out]));

    Ok(KnowledgeBase::assemble(cfg.clone(), params, 0))
}

/// Expected parameter layout for a config; used to validate checkpoints.
pub(crate) fn expected_param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.d_model;
    let mut out = BTreeMap::new();
    out.insert("embed.tok".into(), vec![cfg.vocab_in, d]);
    out.insert("embed.pos".into(), vec![cfg.max_seq_len, d]);
    for l in 0..cfg.n_layers {
        let n = layer_names(l);
        out.insert(n.ln1_gain, vec![d]);
        out.insert(n.ln1_bias, vec![d]);
        out.insert(n.wq, vec![d, d]);
        out.insert(n.wk, vec![d, d]);
        out.insert(n.wv, vec![d, d]);
        out.insert(n.wo, vec![d, d]);
        out.insert(n.ln2_gain, vec![d]);
        out.insert(n.ln2_bias, vec![d]);
        out.insert(n.w1, vec![cfg.d_ff, d]);
        out.insert(n.b1, vec![cfg.d_ff]);
        out.insert(n.w2, vec![d, cfg.d_ff]);
        out.insert(n.b2, vec![d]);
    }
    out.insert("final_ln.gain".into(), vec![d]);
    out.insert("final_ln.bias".into(), vec![d]);
    out.insert("head.w".into(), vec![cfg.vocab_out, d]);
    out.insert("head.b".into(), vec![cfg.vocab_out]);
    out
}

impl std::fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("config", &self.config)
            .field("version", &self.version)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl KnowledgeBase {
    pub(crate) fn assemble(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        version: u32,
    ) -> KnowledgeBase {
        let names = (0..config.n_layers).map(layer_names).collect();
        KnowledgeBase {
            config,
            params,
            version,
            names,
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Adapter attachment targets: the query and key projections of every
    /// layer. Non-empty and stable across versions.
    pub fn attention_qk_paths(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.config.n_layers);
        for n in &self.names {
            out.push(n.wq.clone());
            out.push(n.wk.clone());
        }
        out
    }

    /// All 2-D projection weights an adapter may legally target.
    pub fn linear_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in &self.names {
            out.extend([
                n.wq.clone(),
                n.wk.clone(),
                n.wv.clone(),
                n.wo.clone(),
                n.w1.clone(),
                n.w2.clone(),
            ]);
        }
        out.push("head.w".into());
        out
    }

    /// Trainable parameters with the weight-decay split: projection
    /// weights and embeddings decay; biases and norm gains do not.
    pub fn full_param_set(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (name, t) in &self.params {
            let is_plain = name.ends_with(".bias")
                || name.ends_with(".gain")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name == "head.b";
            if is_plain {
                set.plain.push((name.clone(), t.clone()));
            } else {
                set.decayed.push((name.clone(), t.clone()));
            }
        }
        set
    }

    pub fn set_trainable(&self, flag: bool) {
        for t in self.params.values() {
            t.set_requires_grad(flag);
        }
    }

    pub fn deep_clone(&self) -> KnowledgeBase {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.detached_copy()))
            .collect();
        KnowledgeBase::assemble(self.config.clone(), params, self.version)
    }

    pub(crate) fn set_version(&mut self, v: u32) {
        self.version = v;
    }

    /// FNV-1a over parameter names and value bits, in sorted name order.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in &self.params {
            for &b in name.as_bytes() {
                eat(b);
            }
            for v in t.data().iter() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= self.config.vocab_in) {
            return Err(Error::IndexOutOfRange(format!(
                "token {bad} out of vocab_in {}",
                self.config.vocab_in
            )));
        }
        Ok(())
    }

    /// Validate that every factor pair in the adapter names an existing
    /// projection with matching shapes.
    pub fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        for (path, (a, b)) in adapter.factors() {
            let w = self.params.get(path).ok_or_else(|| {
                Error::AdapterCompatibility(format!("target layer '{path}' not in model"))
            })?;
            let ws = w.shape();
            if ws.len() != 2 {
                return Err(Error::AdapterCompatibility(format!(
                    "target layer '{path}' is not a projection"
                )));
            }
            let (d_out, d_in) = (ws[0], ws[1]);
            let r = adapter.config.rank;
            if a.shape() != [d_out, r] || b.shape() != [r, d_in] {
                return Err(Error::AdapterCompatibility(format!(
                    "factor shapes for '{path}': A {:?}, B {:?} vs weight {:?} rank {r}",
                    a.shape(),
                    b.shape(),
                    ws
                )));
            }
        }
        Ok(())
    }

    /// y = x W^T, plus the scaled low-rank path (alpha/r) (x B^T) A^T when
    /// the adapter carries factors for this projection.
    fn linear(&self, x: &Tensor, path: &str, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        let w = self.param(path)?;
        let mut y = x.matmul_nt(w)?;
        if let Some(ad) = adapter {
            if let Some((a, b)) = ad.factors().get(path) {
                let u = x.matmul_nt(b)?;
                let v = u.matmul_nt(a)?;
                y = y.add(&v.scale(ad.config.scaling()))?;
            }
        }
        Ok(y)
    }

    /// Per-position logits, [len, vocab_out].
    pub fn forward(&self, tokens: &[u16], adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        self.forward_batch(&[tokens], adapter)
    }

    /// Batched forward over equal-length sequences; logits are stacked
    /// row-wise, [n_seqs * len, vocab_out]. Attention never crosses
    /// sequence boundaries.
    pub fn forward_batch(
        &self,
        seqs: &[&[u16]],
        adapter: Option<&LoraAdapter>,
    ) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::Contract("forward_batch on empty batch".into()));
        }
        let len = seqs[0].len();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for seq in seqs {
            self.check_tokens(seq)?;
            if seq.len() != len {
                return Err(Error::Contract(
                    "forward_batch requires equal-length sequences".into(),
                ));
            }
            ids.extend(seq.iter().map(|&t| t as usize));
        }
        if let Some(ad) = adapter {
            self.check_adapter(ad)?;
        }

        let mut x = gather_rows(self.param("embed.tok")?, &ids)?;
        if self.config.use_positional {
            let pos_ids: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
            let pos = gather_rows(self.param("embed.pos")?, &pos_ids)?;
            x = x.add(&pos)?;
        }

        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let names = self.names.clone();

        for n in &names {
            let pre = x.layer_norm(self.param(&n.ln1_gain)?, self.param(&n.ln1_bias)?, LN_EPS)?;
            let q = self.linear(&pre, &n.wq, adapter)?;
            let k = self.linear(&pre, &n.wk, adapter)?;
            let v = self.linear(&pre, &n.wv, adapter)?;
            let mut seq_outs = Vec::with_capacity(seqs.len());
            for s in 0..seqs.len() {
                let qs = q.slice_rows(s * len, len)?;
                let ks = k.slice_rows(s * len, len)?;
                let vs = v.slice_rows(s * len, len)?;
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = qs.slice_cols(h * dh, dh)?;
                    let kh = ks.slice_cols(h * dh, dh)?;
                    let vh = vs.slice_cols(h * dh, dh)?;
                    let attn = qh.matmul_nt(&kh)?.scale(scale).softmax_rows()?;
                    outs.push(attn.matmul(&vh)?);
                }
                seq_outs.push(concat_cols(&outs)?);
            }
            let merged = if seq_outs.len() == 1 {
                seq_outs.pop().expect("one element")
            } else {
                concat_rows(&seq_outs)?
            };
            let attn_out = self.linear(&merged, &n.wo, adapter)?;
            x = x.add(&attn_out)?;

            let pre2 = x.layer_norm(self.param(&n.ln2_gain)?, self.param(&n.ln2_bias)?, LN_EPS)?;
            let mid = self
                .linear(&pre2, &n.w1, adapter)?
                .add_bias(self.param(&n.b1)?)?
                .relu();
            let ffn = self
                .linear(&mid, &n.w2, adapter)?
                .add_bias(self.param(&n.b2)?)?;
            x = x.add(&ffn)?;
        }

        let xf = x.layer_norm(self.param("final_ln.gain")?, self.param("final_ln.bias")?, LN_EPS)?;
        let logits = self
            .linear(&xf, "head.w", adapter)?
            .add_bias(self.param("head.b")?)?;
        Ok(logits)
    }

    /// Argmax per position; ties break toward the lowest index.
    pub fn predict(&self, tokens: &[u16], adapter: Option<&LoraAdapter>) -> Result<Vec<u16>> {
        Ok(self.predict_batch(&[tokens], adapter)?.pop().expect("one sequence"))
    }

    /// Batched argmax predictions for equal-length sequences.
    pub fn predict_batch(
        &self,
        seqs: &[&[u16]],
        adapter: Option<&LoraAdapter>,
    ) -> Result<Vec<Vec<u16>>> {
        let logits = crate::autograd::no_grad(|| self.forward_batch(seqs, adapter))?;
        let (_, v) = logits.dims2("predict")?;
        let len = seqs[0].len();
        let data = logits.data();
        let mut out = Vec::with_capacity(seqs.len());
        let mut row_idx = 0usize;
        for _ in 0..seqs.len() {
            let mut seq_out = Vec::with_capacity(len);
            for _ in 0..len {
                let row = &data[row_idx * v..(row_idx + 1) * v];
                let mut best = 0usize;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                seq_out.push(best as u16);
                row_idx += 1;
            }
            out.push(seq_out);
        }
        Ok(out)
    }
}
