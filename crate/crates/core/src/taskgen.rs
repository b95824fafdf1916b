//! Deterministic synthetic benchmark: disjoint-vocabulary "languages"
//! mapped bijectively onto output tokens, code-switching tasks that mix
//! two languages and perturb a fraction of each mapping, and a suite
//! builder producing the pretraining mixture, the dataset stream, and
//! the backward test sets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, sub_seed};

/// A synthetic language: a contiguous input-token interval mapped onto a
/// contiguous output interval by a seeded bijection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Language {
    pub id: String,
    pub vocab_start: u16,
    pub vocab_len: u16,
    pub out_start: u16,
    /// mapping[t - vocab_start] = output token (absolute id)
    pub mapping: Vec<u16>,
    pub seed: u64,
}

impl Language {
    pub fn contains(&self, token: u16) -> bool {
        token >= self.vocab_start && token < self.vocab_start + self.vocab_len
    }

    /// The base mapping applied to a token of this language.
    pub fn map(&self, token: u16) -> u16 {
        self.mapping[(token - self.vocab_start) as usize]
    }
}

/// Two languages mixed per position, with a fraction `rho` of each
/// language's mapping remapped — the new behavior to be learned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeSwitchTask {
    pub id: String,
    pub lang_a: Language,
    pub lang_b: Language,
    pub mix_ratio: f32,
    pub rho: f32,
    pub seed: u64,
    /// Perturbed mapping tables (same layout as `Language::mapping`).
    pub perturbed_a: Vec<u16>,
    pub perturbed_b: Vec<u16>,
}

impl CodeSwitchTask {
    /// Task label for a token from either language.
    pub fn label(&self, token: u16) -> u16 {
        if self.lang_a.contains(token) {
            self.perturbed_a[(token - self.lang_a.vocab_start) as usize]
        } else {
            self.perturbed_b[(token - self.lang_b.vocab_start) as usize]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u16>,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Lay out `n_languages` disjoint vocab intervals of `vocab_per_lang`
/// tokens each and draw a bijection onto the matching output interval.
pub fn make_languages(
    n_languages: usize,
    vocab_per_lang: usize,
    vocab_in: usize,
    seed: u64,
) -> Result<Vec<Language>> {
    if n_languages == 0 || vocab_per_lang == 0 {
        return Err(Error::Config("need at least one language and token".into()));
    }
    if n_languages * vocab_per_lang > vocab_in {
        return Err(Error::Config(format!(
            "{n_languages} languages x {vocab_per_lang} tokens exceed vocab_in {vocab_in}"
        )));
    }
    if n_languages * vocab_per_lang > u16::MAX as usize {
        return Err(Error::Config("vocabulary exceeds u16 token space".into()));
    }
    let mut out = Vec::with_capacity(n_languages);
    for i in 0..n_languages {
        let start = (i * vocab_per_lang) as u16;
        let lang_seed = sub_seed(seed, &format!("lang/{i}"));
        let mut perm: Vec<u16> = (0..vocab_per_lang as u16).collect();
        let mut rng = rng_for(lang_seed, "pi");
        // Fisher-Yates
        for j in (1..perm.len()).rev() {
            let k = rng.gen_range(0..=j);
            perm.swap(j, k);
        }
        let mapping: Vec<u16> = perm.iter().map(|&p| start + p).collect();
        out.push(Language {
            id: format!("lang{i}"),
            vocab_start: start,
            vocab_len: vocab_per_lang as u16,
            out_start: start,
            mapping,
            seed: lang_seed,
        });
    }
    Ok(out)
}

fn perturb_count(rho: f32, v: usize) -> usize {
    let mut count = (rho as f64 * v as f64).round() as usize;
    if count == 1 {
        count = 2; // a single label cannot change under a bijection
    }
    count.min(v)
}

/// Rotate the labels of the chosen token positions by one, so the result
/// stays a bijection and every chosen token's label changes.
fn rotate_subset(mapping: &[u16], subset: &[usize]) -> Vec<u16> {
    let mut table = mapping.to_vec();
    if subset.len() < 2 {
        return table;
    }
    let first = table[subset[0]];
    for w in 0..subset.len() - 1 {
        table[subset[w]] = table[subset[w + 1]];
    }
    table[subset[subset.len() - 1]] = first;
    table
}

/// Perturb a language mapping on a random `round(rho * vocab)`-token subset.
fn perturb_mapping(lang: &Language, rho: f32, rng: &mut impl Rng) -> Vec<u16> {
    let v = lang.vocab_len as usize;
    let count = perturb_count(rho, v);
    if count < 2 {
        return lang.mapping.clone();
    }
    let mut idx: Vec<usize> = (0..v).collect();
    for j in (1..v).rev() {
        let k = rng.gen_range(0..=j);
        idx.swap(j, k);
    }
    idx.truncate(count);
    rotate_subset(&lang.mapping, &idx)
}

/// Build a code-switching task over a language pair with a random
/// perturbation subset per language.
pub fn make_codeswitch_task(
    id: &str,
    lang_a: &Language,
    lang_b: &Language,
    mix_ratio: f32,
    rho: f32,
    seed: u64,
) -> Result<CodeSwitchTask> {
    check_task_params(lang_a, lang_b, mix_ratio, rho)?;
    let mut rng_a = rng_for(seed, "sigma/a");
    let mut rng_b = rng_for(seed, "sigma/b");
    let perturbed_a = if rho > 0.0 {
        perturb_mapping(lang_a, rho, &mut rng_a)
    } else {
        lang_a.mapping.clone()
    };
    let perturbed_b = if rho > 0.0 {
        perturb_mapping(lang_b, rho, &mut rng_b)
    } else {
        lang_b.mapping.clone()
    };
    Ok(CodeSwitchTask {
        id: id.to_string(),
        lang_a: lang_a.clone(),
        lang_b: lang_b.clone(),
        mix_ratio,
        rho,
        seed,
        perturbed_a,
        perturbed_b,
    })
}

/// Same, but with caller-chosen perturbation subsets. The suite builder
/// uses this to hand each task disjoint token subsets per language, so
/// stream tasks shift different parts of a shared language instead of
/// contradicting each other on the same tokens.
pub fn make_codeswitch_task_with_subsets(
    id: &str,
    lang_a: &Language,
    lang_b: &Language,
    mix_ratio: f32,
    rho: f32,
    seed: u64,
    subset_a: &[usize],
    subset_b: &[usize],
) -> Result<CodeSwitchTask> {
    check_task_params(lang_a, lang_b, mix_ratio, rho)?;
    for (lang, subset) in [(lang_a, subset_a), (lang_b, subset_b)] {
        if subset.iter().any(|&i| i >= lang.vocab_len as usize) {
            return Err(Error::Config(format!(
                "perturbation subset out of range for '{}'",
                lang.id
            )));
        }
    }
    Ok(CodeSwitchTask {
        id: id.to_string(),
        lang_a: lang_a.clone(),
        lang_b: lang_b.clone(),
        mix_ratio,
        rho,
        seed,
        perturbed_a: rotate_subset(&lang_a.mapping, subset_a),
        perturbed_b: rotate_subset(&lang_b.mapping, subset_b),
    })
}

fn check_task_params(lang_a: &Language, lang_b: &Language, mix_ratio: f32, rho: f32) -> Result<()> {
    if !(0.0..1.0).contains(&mix_ratio) || mix_ratio == 0.0 {
        return Err(Error::Config(format!(
            "mix_ratio must be in (0,1), got {mix_ratio}"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must be in [0,1], got {rho}")));
    }
    if lang_a.id == lang_b.id {
        return Err(Error::Config("code-switch pair needs two languages".into()));
    }
    Ok(())
}

/// Uniform draws from one language, labels by its base mapping.
pub fn sample_monolingual(
    lang: &Language,
    n: usize,
    len: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || len == 0 {
        return Err(Error::Contract("empty dataset requested".into()));
    }
    let mut rng = rng_for(seed, "mono");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let tokens: Vec<u16> = (0..len)
            .map(|_| lang.vocab_start + rng.gen_range(0..lang.vocab_len))
            .collect();
        let labels: Vec<u16> = tokens.iter().map(|&t| lang.map(t)).collect();
        samples.push(Sample { tokens, labels });
    }
    Ok(Dataset {
        id: format!("{}-{:?}", lang.id, split).to_lowercase(),
        split,
        samples,
    })
}

/// Per position: language a with probability `mix_ratio`, else b; labels
/// from the perturbed mappings.
pub fn sample_codeswitch(
    task: &CodeSwitchTask,
    n: usize,
    len: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || len == 0 {
        return Err(Error::Contract("empty dataset requested".into()));
    }
    let mut rng = rng_for(seed, "cs");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            let lang = if rng.gen::<f32>() < task.mix_ratio {
                &task.lang_a
            } else {
                &task.lang_b
            };
            let t = lang.vocab_start + rng.gen_range(0..lang.vocab_len);
            tokens.push(t);
            labels.push(task.label(t));
        }
        samples.push(Sample { tokens, labels });
    }
    Ok(Dataset {
        id: format!("{}-{:?}", task.id, split).to_lowercase(),
        split,
        samples,
    })
}

fn default_n_languages() -> usize {
    8
}
fn default_vocab_per_lang() -> usize {
    24
}
fn default_vocab_in() -> usize {
    256
}
fn default_stream_languages() -> usize {
    5
}
fn default_stream_tasks() -> usize {
    6
}
fn default_seq_len() -> usize {
    16
}
fn default_pretrain_per_lang() -> usize {
    500
}
fn default_pretrain_cs_per_pair() -> usize {
    250
}
fn default_train_size() -> usize {
    1000
}
fn default_heldout_size() -> usize {
    80
}
fn default_test_size() -> usize {
    120
}
fn default_rho() -> f32 {
    0.25
}
fn default_group_size() -> usize {
    3
}
fn default_mono_context_fraction() -> f32 {
    0.47
}

/// Suite geometry. Defaults: 8 languages, a 6-dataset stream touching 5
/// of them, backward test sets over all 8.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SuiteSpec {
    #[serde(default = "default_n_languages")]
    pub n_languages: usize,
    #[serde(default = "default_vocab_per_lang")]
    pub vocab_per_lang: usize,
    #[serde(default = "default_vocab_in")]
    pub vocab_in: usize,
    #[serde(default = "default_stream_languages")]
    pub stream_languages: usize,
    #[serde(default = "default_stream_tasks")]
    pub stream_tasks: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_pretrain_per_lang")]
    pub pretrain_per_lang: usize,
    /// Unperturbed mixed-language sequences per pretraining pair; keeps
    /// code-switched contexts in-distribution for the base model.
    #[serde(default = "default_pretrain_cs_per_pair")]
    pub pretrain_cs_per_pair: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_heldout_size")]
    pub heldout_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_rho")]
    pub rho: f32,
    /// Tasks per anchor group: tasks within one group share an anchor
    /// language carrying one common perturbation, so their deltas have a
    /// shared component that survives averaging.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Fraction of each stream dataset drawn as monolingual sequences with
    /// base labels, anchoring the context-conditional behavior.
    #[serde(default = "default_mono_context_fraction")]
    pub mono_context_fraction: f32,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            n_languages: default_n_languages(),
            vocab_per_lang: default_vocab_per_lang(),
            vocab_in: default_vocab_in(),
            stream_languages: default_stream_languages(),
            stream_tasks: default_stream_tasks(),
            seq_len: default_seq_len(),
            pretrain_per_lang: default_pretrain_per_lang(),
            pretrain_cs_per_pair: default_pretrain_cs_per_pair(),
            train_size: default_train_size(),
            heldout_size: default_heldout_size(),
            test_size: default_test_size(),
            rho: default_rho(),
            group_size: default_group_size(),
            mono_context_fraction: default_mono_context_fraction(),
        }
    }
}

/// One stream entry: the task plus its train/heldout/test splits.
#[derive(Debug, Clone)]
pub struct StreamTask {
    pub task: CodeSwitchTask,
    pub train: Dataset,
    pub heldout: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub id: String,
    pub vocab_start: u16,
    pub vocab_len: u16,
    pub in_stream: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamTaskInfo {
    pub id: String,
    pub languages: [String; 2],
    pub mix_ratio: f32,
    pub rho: f32,
    pub train_size: usize,
    pub heldout_size: usize,
    pub test_size: usize,
}

/// What the suite contains; written alongside generated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub fingerprint: String,
    pub languages: Vec<LanguageInfo>,
    pub stream: Vec<StreamTaskInfo>,
    pub backward_tests: Vec<String>,
    pub pretrain_size: usize,
}

/// The full benchmark: pretraining mixture, stream, backward suite.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub spec: SuiteSpec,
    pub seed: u64,
    pub languages: Vec<Language>,
    pub pretrain_train: Dataset,
    pub pretrain_heldout: Dataset,
    /// Monolingual slices of the pretraining held-out set, one per
    /// language, for per-language stop checks.
    pub pretrain_heldout_langs: Vec<Dataset>,
    pub stream: Vec<StreamTask>,
    pub backward_tests: Vec<Dataset>,
    pub manifest: SuiteManifest,
}

impl TaskSuite {
    pub fn stream_task(&self, id: &str) -> Result<&StreamTask> {
        self.stream
            .iter()
            .find(|s| s.task.id == id)
            .ok_or_else(|| Error::Contract(format!("unknown stream dataset '{id}'")))
    }

    pub fn stream_ids(&self) -> Vec<String> {
        self.stream.iter().map(|s| s.task.id.clone()).collect()
    }

    pub fn forward_tests(&self) -> Vec<&Dataset> {
        self.stream.iter().map(|s| &s.test).collect()
    }

    pub fn backward_test_refs(&self) -> Vec<&Dataset> {
        self.backward_tests.iter().collect()
    }
}

/// Stable hex fingerprint of spec + seed; reports refuse to merge across
/// different fingerprints.
pub fn suite_fingerprint(spec: &SuiteSpec, seed: u64) -> String {
    let blob = serde_json::to_string(spec).expect("spec serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in blob.as_bytes().iter().chain(seed.to_le_bytes().iter()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Build the whole deterministic benchmark from a spec and seed.
pub fn make_suite(spec: &SuiteSpec, seed: u64) -> Result<TaskSuite> {
    if spec.stream_languages > spec.n_languages {
        return Err(Error::Config(format!(
            "stream_languages {} exceeds n_languages {}",
            spec.stream_languages, spec.n_languages
        )));
    }
    if spec.stream_languages < 2 {
        return Err(Error::Config("need at least two stream languages".into()));
    }
    if spec.n_languages - spec.stream_languages < 3 {
        return Err(Error::Config(
            "backward suite needs at least 3 languages absent from the stream".into(),
        ));
    }
    let languages = make_languages(
        spec.n_languages,
        spec.vocab_per_lang,
        spec.vocab_in,
        sub_seed(seed, "languages"),
    )?;

    // Pretraining mixture over every language, interleaved.
    let mut pretrain_samples = Vec::new();
    let mut heldout_samples = Vec::new();
    let mut pretrain_heldout_langs = Vec::with_capacity(spec.n_languages);
    for lang in &languages {
        let tr = sample_monolingual(
            lang,
            spec.pretrain_per_lang,
            spec.seq_len,
            Split::Train,
            sub_seed(seed, &format!("pretrain/{}/train", lang.id)),
        )?;
        let ho = sample_monolingual(
            lang,
            (spec.pretrain_per_lang / 4).max(1),
            spec.seq_len,
            Split::Heldout,
            sub_seed(seed, &format!("pretrain/{}/heldout", lang.id)),
        )?;
        pretrain_samples.extend(tr.samples);
        heldout_samples.extend(ho.samples.iter().cloned());
        pretrain_heldout_langs.push(ho);
    }
    // Unperturbed code-switch mixtures over a ring of language pairs (plus
    // skip-one pairs), so mixed contexts are familiar to the base model.
    if spec.pretrain_cs_per_pair > 0 && spec.n_languages >= 2 {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..spec.n_languages {
            pairs.push((i, (i + 1) % spec.n_languages));
        }
        if spec.n_languages >= 5 {
            for i in (0..spec.n_languages).step_by(2) {
                pairs.push((i, (i + 2) % spec.n_languages));
            }
        }
        for (idx, (a, b)) in pairs.into_iter().enumerate() {
            if a == b {
                continue;
            }
            let pair_seed = sub_seed(seed, &format!("pretrain-cs/{idx}"));
            let task = make_codeswitch_task(
                &format!("pmix{idx}-{}-{}", languages[a].id, languages[b].id),
                &languages[a],
                &languages[b],
                0.5,
                0.0,
                pair_seed,
            )?;
            let tr = sample_codeswitch(
                &task,
                spec.pretrain_cs_per_pair,
                spec.seq_len,
                Split::Train,
                sub_seed(pair_seed, "train"),
            )?;
            let ho = sample_codeswitch(
                &task,
                (spec.pretrain_cs_per_pair / 10).max(1),
                spec.seq_len,
                Split::Heldout,
                sub_seed(pair_seed, "heldout"),
            )?;
            pretrain_samples.extend(tr.samples);
            heldout_samples.extend(ho.samples);
        }
    }
    let pretrain_train = Dataset {
        id: "pretrain-train".into(),
        split: Split::Train,
        samples: pretrain_samples,
    };
    let pretrain_heldout = Dataset {
        id: "pretrain-heldout".into(),
        split: Split::Heldout,
        samples: heldout_samples,
    };

    // Per-language pools of shuffled token indices. Each stream task takes
    // the next chunk from each of its languages, so tasks sharing a
    // language perturb disjoint tokens (until a pool wraps).
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(spec.n_languages);
    let mut cursors = vec![0usize; spec.n_languages];
    for lang in &languages {
        let v = lang.vocab_len as usize;
        let mut idx: Vec<usize> = (0..v).collect();
        let mut rng = rng_for(lang.seed, "sigma-pool");
        for j in (1..v).rev() {
            let k = rng.gen_range(0..=j);
            idx.swap(j, k);
        }
        pools.push(idx);
    }
    let mut take_chunk = |lang_idx: usize, count: usize| -> Vec<usize> {
        let pool = &pools[lang_idx];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(pool[cursors[lang_idx] % pool.len()]);
            cursors[lang_idx] += 1;
        }
        out
    };

    // Stream: earlier groups pair languages privately (pool-disjoint
    // perturbations), while the final group of `group_size` tasks shares
    // one anchor language carrying a single common perturbation — the
    // component of the averaged delta that the last centralization keeps
    // at meaningful strength.
    let s = spec.stream_languages;
    let group = spec.group_size.max(1);
    let count = perturb_count(spec.rho, spec.vocab_per_lang);
    let n_groups = spec.stream_tasks.div_ceil(group);
    // The anchor language never appears in earlier tasks: a task trained
    // with base labels on the anchor's tokens would unlearn its behavior.
    let anchor = s - 1;
    let mut stream = Vec::with_capacity(spec.stream_tasks);
    let mut anchor_subset: Option<Vec<usize>> = None;
    let mut partner_cursor = 0usize;
    for i in 0..spec.stream_tasks {
        let w = i / group;
        let anchored = w + 1 == n_groups && n_groups > 1;
        let mut next_partner = |cursor: &mut usize| -> usize {
            let mut p = *cursor % s;
            while p == anchor {
                *cursor += 1;
                p = *cursor % s;
            }
            *cursor += 1;
            p
        };
        let (a, b) = if anchored {
            (anchor, next_partner(&mut partner_cursor))
        } else {
            let p1 = next_partner(&mut partner_cursor);
            let mut p2 = next_partner(&mut partner_cursor);
            if p2 == p1 {
                p2 = next_partner(&mut partner_cursor);
            }
            (p1, p2)
        };

        let task_seed = sub_seed(seed, &format!("cs/{i}"));
        let mut mix_rng = rng_for(task_seed, "mix");
        let mix = 0.4 + 0.2 * mix_rng.gen::<f32>();
        let id = format!("cs{i}-{}-{}", languages[a].id, languages[b].id);
        let subset_a = if anchored {
            anchor_subset
                .get_or_insert_with(|| take_chunk(a, count))
                .clone()
        } else {
            take_chunk(a, count)
        };
        let subset_b = take_chunk(b, count);
        let task = make_codeswitch_task_with_subsets(
            &id,
            &languages[a],
            &languages[b],
            mix,
            spec.rho,
            task_seed,
            &subset_a,
            &subset_b,
        )?;

        // train/heldout mix in some monolingual-context sequences with
        // base labels; tests stay purely code-switched
        let build_split = |n: usize, split: Split, label: &str| -> Result<Dataset> {
            let n_mono = ((n as f32) * spec.mono_context_fraction).round() as usize;
            let n_cs = n - n_mono;
            let mut ds = sample_codeswitch(
                &task,
                n_cs.max(1),
                spec.seq_len,
                split,
                sub_seed(task_seed, label),
            )?;
            if n_mono > 0 {
                // two thirds on the member pair, the rest spread over the
                // other stream languages so every adapter keeps seeing the
                // base behavior it must not disturb
                let member = (n_mono * 3 / 4) / 2;
                let mut quotas = vec![0usize; s];
                quotas[a] += member;
                quotas[b] += member;
                let mut rest = n_mono - 2 * member;
                let mut j = 0usize;
                while rest > 0 {
                    quotas[j % s] += 1;
                    rest -= 1;
                    j += 1;
                }
                for (li, &q) in quotas.iter().enumerate() {
                    if q == 0 {
                        continue;
                    }
                    ds.samples.extend(
                        sample_monolingual(
                            &languages[li],
                            q,
                            spec.seq_len,
                            split,
                            sub_seed(task_seed, &format!("{label}/mono-{li}")),
                        )?
                        .samples,
                    );
                }
            }
            ds.id = format!("{}-{:?}", task.id, split).to_lowercase();
            Ok(ds)
        };
        let train = build_split(spec.train_size, Split::Train, "train")?;
        let heldout = build_split(spec.heldout_size, Split::Heldout, "heldout")?;
        let test = sample_codeswitch(
            &task,
            spec.test_size,
            spec.seq_len,
            Split::Test,
            sub_seed(task_seed, "test"),
        )?;
        stream.push(StreamTask {
            task,
            train,
            heldout,
            test,
        });
    }

    // Backward suite: one monolingual test set per language.
    let mut backward_tests = Vec::with_capacity(spec.n_languages);
    for lang in &languages {
        backward_tests.push(sample_monolingual(
            lang,
            spec.test_size,
            spec.seq_len,
            Split::Test,
            sub_seed(seed, &format!("backward/{}", lang.id)),
        )?);
    }

    let manifest = SuiteManifest {
        fingerprint: suite_fingerprint(spec, seed),
        languages: languages
            .iter()
            .enumerate()
            .map(|(i, l)| LanguageInfo {
                id: l.id.clone(),
                vocab_start: l.vocab_start,
                vocab_len: l.vocab_len,
                in_stream: i < s,
            })
            .collect(),
        stream: stream
            .iter()
            .map(|st| StreamTaskInfo {
                id: st.task.id.clone(),
                languages: [st.task.lang_a.id.clone(), st.task.lang_b.id.clone()],
                mix_ratio: st.task.mix_ratio,
                rho: st.task.rho,
                train_size: st.train.len(),
                heldout_size: st.heldout.len(),
                test_size: st.test.len(),
            })
            .collect(),
        backward_tests: backward_tests.iter().map(|d| d.id.clone()).collect(),
        pretrain_size: pretrain_train.len(),
    };

    Ok(TaskSuite {
        spec: spec.clone(),
        seed,
        languages,
        pretrain_train,
        pretrain_heldout,
        pretrain_heldout_langs,
        stream,
        backward_tests,
        manifest,
    })
}
