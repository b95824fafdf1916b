//! Low-rank adapters: construction, delta composition, averaging, merge
//! into the base model, scaling and sparsity measurement.
//!
//! Averaging is performed in delta space — the composed `(alpha/r) A B`
//! matrices — not factor space; averaging A and B separately does not
//! equal the average of their products. A factor-space average is kept
//! as a diagnostic for comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::KnowledgeBase;
use crate::seed::rng_for;

fn default_rank() -> usize {
    4
}
fn default_alpha() -> f32 {
    8.0
}
fn default_sigma() -> f32 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_sigma")]
    pub init_sigma: f32,
    /// Projection paths to adapt. Empty selects the model's default
    /// targets: the query and key projections of every layer.
    #[serde(default)]
    pub target_layers: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: default_rank(),
            alpha: default_alpha(),
            init_sigma: default_sigma(),
            target_layers: Vec::new(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::Config("lora init_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-target-layer factor pairs (A: [d_out, r], B: [r, d_in]).
pub struct LoraAdapter {
    pub config: LoraConfig,
    factors: BTreeMap<String, (Tensor, Tensor)>,
    pub trained_on: String,
    pub base_version: u32,
}

/// Create a fresh adapter against `kb`: A seeded Gaussian(0, sigma^2),
/// B zero, so the composed delta starts exactly at zero.
pub fn init_adapter(
    kb: &KnowledgeBase,
    cfg: &LoraConfig,
    dataset_id: &str,
    seed: u64,
) -> Result<LoraAdapter> {
    cfg.validate()?;
    let mut targets = cfg.target_layers.clone();
    if targets.is_empty() {
        targets = kb.attention_qk_paths();
    }
    if targets.is_empty() {
        return Err(Error::Config("no adapter target layers".into()));
    }
    let mut resolved = cfg.clone();
    resolved.target_layers = targets.clone();

    let mut factors = BTreeMap::new();
    for path in &targets {
        let w = kb.param(path).map_err(|_| {
            Error::AdapterCompatibility(format!("target layer '{path}' not in model"))
        })?;
        let shape = w.shape();
        if shape.len() != 2 {
            return Err(Error::AdapterCompatibility(format!(
                "target layer '{path}' is not a 2-D projection"
            )));
        }
        let (d_out, d_in) = (shape[0], shape[1]);
        let min_dim = d_out.min(d_in);
        if cfg.rank > min_dim / 4 {
            return Err(Error::Config(format!(
                "rank {} too large for '{path}' ({d_out}x{d_in}); must be <= {}",
                cfg.rank,
                min_dim / 4
            )));
        }
        let mut rng = rng_for(seed, &format!("lora/{path}/a"));
        let a = Tensor::randn(&[d_out, cfg.rank], cfg.init_sigma, &mut rng);
        let b = Tensor::zeros(&[cfg.rank, d_in]);
        factors.insert(path.clone(), (a, b));
    }
    Ok(LoraAdapter {
        config: resolved,
        factors,
        trained_on: dataset_id.to_string(),
        base_version: kb.version,
    })
}

impl LoraAdapter {
    pub(crate) fn from_parts(
        config: LoraConfig,
        factors: BTreeMap<String, (Tensor, Tensor)>,
        trained_on: String,
        base_version: u32,
    ) -> LoraAdapter {
        LoraAdapter {
            config,
            factors,
            trained_on,
            base_version,
        }
    }

    pub fn factors(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.factors
    }

    pub fn trainable_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (path, (a, b)) in &self.factors {
            set.decayed.push((format!("{path}/A"), a.clone()));
            set.decayed.push((format!("{path}/B"), b.clone()));
        }
        set
    }

    pub fn set_trainable(&self, flag: bool) {
        for (a, b) in self.factors.values() {
            a.set_requires_grad(flag);
            b.set_requires_grad(flag);
        }
    }

    pub fn deep_clone(&self) -> LoraAdapter {
        let factors = self
            .factors
            .iter()
            .map(|(k, (a, b))| (k.clone(), (a.detached_copy(), b.detached_copy())))
            .collect();
        LoraAdapter {
            config: self.config.clone(),
            factors,
            trained_on: self.trained_on.clone(),
            base_version: self.base_version,
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, (a, b)) in &self.factors {
            for &byte in name.as_bytes() {
                eat(byte);
            }
            for t in [a, b] {
                for v in t.data().iter() {
                    for byte in v.to_le_bytes() {
                        eat(byte);
                    }
                }
            }
        }
        h
    }
}

/// Dense per-layer update matrices, closed under addition and scaling.
#[derive(Clone)]
pub struct DeltaSet {
    layers: BTreeMap<String, Tensor>,
}

impl DeltaSet {
    pub fn from_layers(layers: BTreeMap<String, Tensor>) -> DeltaSet {
        DeltaSet { layers }
    }

    pub fn layers(&self) -> &BTreeMap<String, Tensor> {
        &self.layers
    }

    /// Zero deltas shaped like the given projection paths of `kb`.
    pub fn zeros_for(kb: &KnowledgeBase, targets: &[String]) -> Result<DeltaSet> {
        let mut layers = BTreeMap::new();
        for path in targets {
            let w = kb.param(path)?;
            layers.insert(path.clone(), Tensor::zeros(&w.shape()));
        }
        Ok(DeltaSet { layers })
    }

    pub fn add_assign(&mut self, other: &DeltaSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Contract(
                "delta sets with different layer sets".into(),
            ));
        }
        for (path, t) in &self.layers {
            let o = other
                .layers
                .get(path)
                .ok_or_else(|| Error::Contract(format!("delta missing layer '{path}'")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape("delta add", &t.shape(), &o.shape()));
            }
            let src = o.data();
            let mut dst = t.data_mut();
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Entrywise scaling by `c`.
    pub fn scaled(&self, c: f32) -> DeltaSet {
        let layers = self
            .layers
            .iter()
            .map(|(k, t)| {
                let data: Vec<f32> = t.data().iter().map(|v| v * c).collect();
                (k.clone(), Tensor::raw_from(data, &t.shape()))
            })
            .collect();
        DeltaSet { layers }
    }

    /// Fraction of entries with |w| < eps, across all layers.
    pub fn sparsity(&self, eps: f32) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("sparsity eps must be > 0, got {eps}")));
        }
        let mut total = 0usize;
        let mut small = 0usize;
        for t in self.layers.values() {
            for &v in t.data().iter() {
                total += 1;
                if v.abs() < eps {
                    small += 1;
                }
            }
        }
        Ok(small as f64 / total as f64)
    }

    /// Sparsity with a per-layer threshold of `rel` times that layer's RMS
    /// magnitude. Diagnostic companion to the absolute-threshold measure.
    pub fn sparsity_relative(&self, rel: f32) -> Result<f64> {
        if !(rel > 0.0) {
            return Err(Error::Contract(format!("sparsity rel must be > 0, got {rel}")));
        }
        let mut total = 0usize;
        let mut small = 0usize;
        for t in self.layers.values() {
            let data = t.data();
            let ms: f64 =
                data.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / data.len() as f64;
            let eps = rel as f64 * ms.sqrt();
            for &v in data.iter() {
                total += 1;
                if (v.abs() as f64) < eps {
                    small += 1;
                }
            }
        }
        Ok(small as f64 / total as f64)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.layers
            .values()
            .map(|t| t.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &DeltaSet) -> Result<f64> {
        let mut max = 0.0f64;
        for (path, t) in &self.layers {
            let o = other
                .layers
                .get(path)
                .ok_or_else(|| Error::Contract(format!("delta missing layer '{path}'")))?;
            let (a, b) = (t.data(), o.data());
            for (x, y) in a.iter().zip(b.iter()) {
                max = max.max((x - y).abs() as f64);
            }
        }
        Ok(max)
    }
}

// DeltaSet tensors never participate in autograd; a plain constructor
// avoids the shape-product revalidation of `from_vec`.
impl Tensor {
    pub(crate) fn raw_from(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape).expect("shape/data agreement")
    }
}

/// Compose the dense per-layer update (alpha/r) A B implied by an adapter.
pub fn compose_delta(adapter: &LoraAdapter) -> DeltaSet {
    let scale = adapter.config.scaling() as f64;
    let r = adapter.config.rank;
    let mut layers = BTreeMap::new();
    for (path, (a, b)) in &adapter.factors {
        let (d_out, d_in) = (a.shape()[0], b.shape()[1]);
        let av = a.data();
        let bv = b.data();
        let mut out = vec![0.0f32; d_out * d_in];
        for i in 0..d_out {
            for j in 0..d_in {
                let mut s = 0.0f64;
                for p in 0..r {
                    s += av[i * r + p] as f64 * bv[p * d_in + j] as f64;
                }
                out[i * d_in + j] = (scale * s) as f32;
            }
        }
        layers.insert(path.clone(), Tensor::raw_from(out, &[d_out, d_in]));
    }
    DeltaSet { layers }
}

/// Entrywise arithmetic mean of the given delta sets, f64 accumulation.
pub fn average_deltas(deltas: &[DeltaSet]) -> Result<DeltaSet> {
    if deltas.is_empty() {
        return Err(Error::Contract("average_deltas of an empty list".into()));
    }
    let first = &deltas[0];
    let inv = 1.0f64 / deltas.len() as f64;
    let mut layers = BTreeMap::new();
    for (path, t) in &first.layers {
        let shape = t.shape();
        let mut acc = vec![0.0f64; t.numel()];
        for d in deltas {
            let o = d
                .layers
                .get(path)
                .ok_or_else(|| Error::Contract(format!("delta missing layer '{path}'")))?;
            if o.shape() != shape {
                return Err(Error::shape("average_deltas", &shape, &o.shape()));
            }
            for (a, &v) in acc.iter_mut().zip(o.data().iter()) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
        layers.insert(path.clone(), Tensor::raw_from(data, &shape));
    }
    Ok(DeltaSet { layers })
}

/// New knowledge base with `W <- W + dW` on each delta layer and the
/// version bumped; the input model is left untouched.
pub fn lora_merge(kb: &KnowledgeBase, delta: &DeltaSet) -> Result<KnowledgeBase> {
    let mut merged = kb.deep_clone();
    for (path, d) in &delta.layers {
        let w = merged.param(path).map_err(|_| {
            Error::AdapterCompatibility(format!("delta targets unknown layer '{path}'"))
        })?;
        if w.shape() != d.shape() {
            return Err(Error::shape("lora_merge", &w.shape(), &d.shape()));
        }
        let src = d.data();
        let mut dst = w.data_mut();
        for (wi, &di) in dst.iter_mut().zip(src.iter()) {
            *wi += di;
        }
    }
    merged.set_version(kb.version + 1);
    Ok(merged)
}

/// Diagnostic: average A and B across adapters in factor space, then
/// compose. Generally differs from the delta-space mean; kept only for
/// comparisons in reports.
pub fn factor_space_average(adapters: &[&LoraAdapter]) -> Result<DeltaSet> {
    if adapters.is_empty() {
        return Err(Error::Contract("factor average of an empty list".into()));
    }
    let first = adapters[0];
    let inv = 1.0 / adapters.len() as f32;
    let mut factors = BTreeMap::new();
    for (path, (a0, b0)) in &first.factors {
        let (sa, sb) = (a0.shape(), b0.shape());
        let mut acc_a = vec![0.0f64; a0.numel()];
        let mut acc_b = vec![0.0f64; b0.numel()];
        for ad in adapters {
            let (a, b) = ad
                .factors
                .get(path)
                .ok_or_else(|| Error::Contract(format!("adapter missing layer '{path}'")))?;
            if a.shape() != sa || b.shape() != sb {
                return Err(Error::shape("factor_space_average", &sa, &a.shape()));
            }
            for (x, &v) in acc_a.iter_mut().zip(a.data().iter()) {
                *x += v as f64;
            }
            for (x, &v) in acc_b.iter_mut().zip(b.data().iter()) {
                *x += v as f64;
            }
        }
        let a: Vec<f32> = acc_a.iter().map(|&v| v as f32 * inv).collect();
        let b: Vec<f32> = acc_b.iter().map(|&v| v as f32 * inv).collect();
        factors.insert(
            path.clone(),
            (Tensor::raw_from(a, &sa), Tensor::raw_from(b, &sb)),
        );
    }
    let avg = LoraAdapter {
        config: first.config.clone(),
        factors,
        trained_on: "factor-average".into(),
        base_version: first.base_version,
    };
    Ok(compose_delta(&avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn kb() -> KnowledgeBase {
        init_model(&ModelConfig {
            vocab_in: 24,
            vocab_out: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 10,
            use_positional: true,
            seed: 1,
        })
        .unwrap()
    }

    fn gaussian_delta(shape: &[usize], sigma: f32, seed: u64) -> DeltaSet {
        let mut rng = rng_for(seed, "delta");
        let mut layers = BTreeMap::new();
        layers.insert("w".to_string(), Tensor::randn(shape, sigma, &mut rng));
        DeltaSet { layers }
    }

    #[test]
    fn fresh_adapter_composes_to_zero() {
        let kb = kb();
        let ad = init_adapter(&kb, &LoraConfig::default(), "d0", 3).unwrap();
        let delta = compose_delta(&ad);
        for t in delta.layers().values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(ad.base_version, 0);
        assert_eq!(delta.sparsity(1e-8).unwrap(), 1.0);
    }

    #[test]
    fn adapter_init_deterministic_per_seed() {
        let kb = kb();
        let a = init_adapter(&kb, &LoraConfig::default(), "d0", 3).unwrap();
        let b = init_adapter(&kb, &LoraConfig::default(), "d0", 3).unwrap();
        let c = init_adapter(&kb, &LoraConfig::default(), "d0", 4).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn adapter_init_variance_near_sigma_squared() {
        let kb = kb();
        let sigma = 0.02f64;
        let mut values = Vec::new();
        // pool A entries across seeds to pass 1e4 samples
        for seed in 0..80 {
            let ad = init_adapter(&kb, &LoraConfig::default(), "d", seed).unwrap();
            for (a, _) in ad.factors().values() {
                values.extend(a.data().iter().map(|&v| v as f64));
            }
        }
        assert!(values.len() >= 10_000, "{} samples", values.len());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        let want = sigma * sigma;
        assert!(
            (var - want).abs() / want < 0.10,
            "var {var} vs sigma^2 {want}"
        );
    }

    #[test]
    fn unknown_target_layer_is_compat_error() {
        let kb = kb();
        let cfg = LoraConfig {
            target_layers: vec!["layers.9.attn.wq".into()],
            ..LoraConfig::default()
        };
        assert!(matches!(
            init_adapter(&kb, &cfg, "d0", 1),
            Err(Error::AdapterCompatibility(_))
        ));
    }

    #[test]
    fn oversized_rank_rejected() {
        let kb = kb();
        let cfg = LoraConfig {
            rank: 5, // 16/4 = 4 is the cap for d=16
            ..LoraConfig::default()
        };
        assert!(matches!(init_adapter(&kb, &cfg, "d0", 1), Err(Error::Config(_))));
    }

    #[test]
    fn compose_delta_rank_one_example() {
        // r=1, alpha=1, A=[[1],[0]], B=[[0,1]] -> delta [[0,1],[0,0]]
        let mut factors = BTreeMap::new();
        factors.insert(
            "w".to_string(),
            (
                Tensor::from_vec(vec![1.0, 0.0], &[2, 1]).unwrap(),
                Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap(),
            ),
        );
        let ad = LoraAdapter {
            config: LoraConfig {
                rank: 1,
                alpha: 1.0,
                init_sigma: 0.02,
                target_layers: vec!["w".into()],
            },
            factors,
            trained_on: "x".into(),
            base_version: 0,
        };
        let d = compose_delta(&ad);
        assert_eq!(d.layers()["w"].to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.sparsity(1e-8).unwrap(), 0.75);
    }

    #[test]
    fn alpha_equal_rank_is_unit_scale() {
        let mut rng = rng_for(5, "ab");
        let a = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut factors = BTreeMap::new();
        factors.insert("w".to_string(), (a.clone(), b.clone()));
        let ad = LoraAdapter {
            config: LoraConfig {
                rank: 2,
                alpha: 2.0,
                init_sigma: 0.02,
                target_layers: vec!["w".into()],
            },
            factors,
            trained_on: "x".into(),
            base_version: 0,
        };
        let d = compose_delta(&ad);
        // plain A.B
        let want = a.matmul(&b).unwrap().to_vec();
        let got = d.layers()["w"].to_vec();
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn average_is_idempotent_on_identical_deltas() {
        let d = gaussian_delta(&[6, 5], 0.5, 9);
        let avg = average_deltas(&[d.clone(), d.clone(), d.clone()]).unwrap();
        assert!(avg.max_abs_diff(&d).unwrap() < 1e-7);
    }

    #[test]
    fn average_arithmetic_and_errors() {
        let mut l1 = BTreeMap::new();
        l1.insert("w".to_string(), Tensor::from_vec(vec![2.0], &[1, 1]).unwrap());
        let mut l2 = BTreeMap::new();
        l2.insert("w".to_string(), Tensor::from_vec(vec![0.0], &[1, 1]).unwrap());
        let avg = average_deltas(&[DeltaSet::from_layers(l1), DeltaSet::from_layers(l2)]).unwrap();
        assert_eq!(avg.layers()["w"].to_vec(), vec![1.0]);

        assert!(matches!(
            average_deltas(&[]),
            Err(Error::Contract(_))
        ));
        let a = gaussian_delta(&[2, 2], 1.0, 1);
        let b = gaussian_delta(&[2, 3], 1.0, 2);
        assert!(average_deltas(&[a, b]).is_err());
    }

    #[test]
    fn average_of_delta_and_its_negation_is_zero() {
        let d = gaussian_delta(&[4, 4], 0.3, 2);
        let avg = average_deltas(&[d.clone(), d.scaled(-1.0)]).unwrap();
        assert!(avg.frobenius_norm() < 1e-7);
    }

    #[test]
    fn average_commutes_with_scaling() {
        let a = gaussian_delta(&[5, 3], 0.4, 3);
        let b = gaussian_delta(&[5, 3], 0.4, 4);
        let lhs = average_deltas(&[a.scaled(2.5), b.scaled(2.5)]).unwrap();
        let rhs = average_deltas(&[a, b]).unwrap().scaled(2.5);
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
    }

    #[test]
    fn variance_contraction_of_averages() {
        // mean of N i.i.d. N(0, sigma^2) delta sets has variance sigma^2/N
        let sigma = 0.02f64;
        let entries = 400 * 256; // >= 1e5
        for &n in &[2usize, 8, 32] {
            let sets: Vec<DeltaSet> = (0..n)
                .map(|i| gaussian_delta(&[400, 256], sigma as f32, 1000 + i as u64))
                .collect();
            let avg = average_deltas(&sets).unwrap();
            let data = avg.layers()["w"].to_vec();
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
            let var = data
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / data.len() as f64;
            let want = sigma * sigma / n as f64;
            assert!(
                (var - want).abs() / want < 0.10,
                "N={n}: var {var} vs {want}"
            );
            let mean_bound = 3.0 * sigma / ((n * entries) as f64).sqrt();
            assert!(mean.abs() < mean_bound, "N={n}: mean {mean} vs {mean_bound}");
        }
    }

    #[test]
    fn merge_zero_delta_keeps_params_bumps_version() {
        let kb = kb();
        let zero = DeltaSet::zeros_for(&kb, &kb.attention_qk_paths()).unwrap();
        let merged = lora_merge(&kb, &zero).unwrap();
        assert_eq!(merged.version, 1);
        assert_eq!(merged.content_hash(), kb.content_hash());
    }

    #[test]
    fn merge_then_unmerge_roundtrips() {
        let kb = kb();
        let ad = {
            let a = init_adapter(&kb, &LoraConfig::default(), "d0", 7).unwrap();
            // give B nonzero mass so the delta is non-trivial
            for (_, b) in a.factors().values() {
                let mut d = b.data_mut();
                for (i, v) in d.iter_mut().enumerate() {
                    *v = ((i % 7) as f32 - 3.0) * 0.01;
                }
            }
            a
        };
        let delta = compose_delta(&ad);
        let merged = lora_merge(&kb, &delta).unwrap();
        let back = lora_merge(&merged, &delta.scaled(-1.0)).unwrap();
        assert_eq!(back.version, 2);
        for name in kb.param_names() {
            let (x, y) = (kb.param(name).unwrap(), back.param(name).unwrap());
            for (a, b) in x.data().iter().zip(y.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_equivalence_with_adapter_forward() {
        use rand::Rng;
        let kb = kb();
        let ad = init_adapter(&kb, &LoraConfig::default(), "d0", 11).unwrap();
        // random factor mass on both A and B
        let mut rng = rng_for(11, "populate");
        for (a, b) in ad.factors().values() {
            for v in a.data_mut().iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
            for v in b.data_mut().iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let merged = lora_merge(&kb, &compose_delta(&ad)).unwrap();
        let mut max = 0.0f32;
        for _ in 0..100 {
            let toks: Vec<u16> = (0..6).map(|_| rng.gen_range(0..24)).collect();
            let via_adapter = kb.forward(&toks, Some(&ad)).unwrap().to_vec();
            let via_merge = merged.forward(&toks, None).unwrap().to_vec();
            for (x, y) in via_adapter.iter().zip(via_merge.iter()) {
                max = max.max((x - y).abs());
            }
        }
        assert!(max < 1e-4, "max abs logit diff {max}");
    }

    #[test]
    fn merge_rejects_shape_mismatch() {
        let kb = kb();
        let mut layers = BTreeMap::new();
        layers.insert("layers.0.attn.wq".to_string(), Tensor::zeros(&[4, 4]));
        let bad = DeltaSet::from_layers(layers);
        assert!(lora_merge(&kb, &bad).is_err());
    }

    #[test]
    fn scale_delta_examples() {
        let d = gaussian_delta(&[3, 3], 0.5, 21);
        assert!(d.scaled(1.0).max_abs_diff(&d).unwrap() == 0.0);
        assert_eq!(d.scaled(0.0).frobenius_norm(), 0.0);
        let mut sum = d.scaled(2.0);
        sum.add_assign(&d.scaled(-2.0)).unwrap();
        assert_eq!(sum.frobenius_norm(), 0.0);
    }

    #[test]
    fn sparsity_counts() {
        let mut layers = BTreeMap::new();
        layers.insert(
            "w".to_string(),
            Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0], &[2, 2]).unwrap(),
        );
        let d = DeltaSet::from_layers(layers);
        assert_eq!(d.sparsity(1e-8).unwrap(), 0.75);
        let ones = DeltaSet::from_layers(
            [("w".to_string(), Tensor::full(&[2, 2], 1.0))]
                .into_iter()
                .collect(),
        );
        assert_eq!(ones.sparsity(1e-8).unwrap(), 0.0);
        assert!(ones.sparsity(0.0).is_err());
    }

    #[test]
    fn factor_average_differs_from_delta_average_in_general() {
        let kb = kb();
        let mut adapters = Vec::new();
        let mut rng = rng_for(31, "factor-avg");
        use rand::Rng;
        for s in 0..3u64 {
            let ad = init_adapter(&kb, &LoraConfig::default(), "d", 100 + s).unwrap();
            for (a, b) in ad.factors().values() {
                for v in a.data_mut().iter_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
                for v in b.data_mut().iter_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
            adapters.push(ad);
        }
        let deltas: Vec<DeltaSet> = adapters.iter().map(compose_delta).collect();
        let delta_avg = average_deltas(&deltas).unwrap();
        let refs: Vec<&LoraAdapter> = adapters.iter().collect();
        let factor_avg = factor_space_average(&refs).unwrap();
        assert!(
            delta_avg.max_abs_diff(&factor_avg).unwrap() > 1e-4,
            "factor-space and delta-space averages should differ for generic factors"
        );
    }
}
