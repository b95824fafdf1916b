//! Deterministic persistence: binary checkpoints for the knowledge base,
//! adapters and delta sets; length-prefixed dataset records; CSV and JSON
//! report files. All multi-byte values are little-endian, all text files
//! UTF-8 with LF endings, and every write lands atomically (temp + rename).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::eval::MetricsMatrix;
use crate::lora::{DeltaSet, LoraAdapter, LoraConfig};
use crate::model::{expected_param_shapes, KnowledgeBase, ModelConfig};
use crate::taskgen::{Dataset, Sample, Split, TaskSuite};

pub const FORMAT_VERSION: u32 = 1;

pub const MAGIC_KNOWLEDGE_BASE: &[u8; 4] = b"CLKB";
pub const MAGIC_ADAPTER: &[u8; 4] = b"CLAD";
pub const MAGIC_DELTA: &[u8; 4] = b"CLDL";
pub const MAGIC_DATASET: &[u8; 4] = b"CLDS";

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp.{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

// ---- binary primitives -------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(format!("bad utf-8: {e}")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

// ---- tensor checkpoints ------------------------------------------------

fn encode_checkpoint(
    magic: &[u8; 4],
    meta: &serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    put_u32(&mut buf, FORMAT_VERSION);
    put_string(&mut buf, &meta.to_string());
    for (name, shape, data) in tensors {
        put_string(&mut buf, name);
        put_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode_checkpoint(
    bytes: &[u8],
    magic: &[u8; 4],
) -> Result<(serde_json::Value, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let mut r = Reader::new(bytes);
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "magic mismatch: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(got)
        )));
    }
    let version = r.u32()?;
    if version > FORMAT_VERSION {
        return Err(Error::Format(format!(
            "file format version {version} is newer than supported {FORMAT_VERSION}"
        )));
    }
    let meta: serde_json::Value =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Serde(e.to_string()))?;
    let mut tensors = Vec::new();
    while !r.done() {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok((meta, tensors))
}

pub fn save_knowledge_base(path: &Path, kb: &KnowledgeBase) -> Result<()> {
    let meta = serde_json::json!({
        "model_config": kb.config,
        "version": kb.version,
    });
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = kb
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape(), t.to_vec()))
        .collect();
    atomic_write(path, &encode_checkpoint(MAGIC_KNOWLEDGE_BASE, &meta, &tensors))
}

pub fn load_knowledge_base(path: &Path) -> Result<KnowledgeBase> {
    let bytes = fs::read(path)?;
    let (meta, tensors) = decode_checkpoint(&bytes, MAGIC_KNOWLEDGE_BASE)?;
    let config: ModelConfig = serde_json::from_value(meta["model_config"].clone())
        .map_err(|e| Error::Serde(format!("model_config: {e}")))?;
    let version = meta["version"]
        .as_u64()
        .ok_or_else(|| Error::Format("missing version field".into()))? as u32;
    config.validate()?;

    let expected = expected_param_shapes(&config);
    let mut params = BTreeMap::new();
    for (name, shape, data) in tensors {
        match expected.get(&name) {
            Some(want) if *want == shape => {
                params.insert(name, Tensor::from_vec(data, &shape)?);
            }
            Some(want) => {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {shape:?}, expected {want:?}"
                )))
            }
            None => return Err(Error::Format(format!("unexpected parameter '{name}'"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, config implies {}",
            params.len(),
            expected.len()
        )));
    }
    Ok(KnowledgeBase::assemble(config, params, version))
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    let meta = serde_json::json!({
        "lora_config": adapter.config,
        "trained_on": adapter.trained_on,
        "base_version": adapter.base_version,
    });
    let mut tensors = Vec::new();
    for (layer, (a, b)) in adapter.factors() {
        tensors.push((format!("{layer}/A"), a.shape(), a.to_vec()));
        tensors.push((format!("{layer}/B"), b.shape(), b.to_vec()));
    }
    atomic_write(path, &encode_checkpoint(MAGIC_ADAPTER, &meta, &tensors))
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = fs::read(path)?;
    let (meta, tensors) = decode_checkpoint(&bytes, MAGIC_ADAPTER)?;
    let config: LoraConfig = serde_json::from_value(meta["lora_config"].clone())
        .map_err(|e| Error::Serde(format!("lora_config: {e}")))?;
    let trained_on = meta["trained_on"].as_str().unwrap_or_default().to_string();
    let base_version = meta["base_version"].as_u64().unwrap_or(0) as u32;

    let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (name, shape, data) in tensors {
        let (layer, part) = name
            .rsplit_once('/')
            .ok_or_else(|| Error::Format(format!("bad factor record '{name}'")))?;
        let t = Tensor::from_vec(data, &shape)?;
        let entry = halves.entry(layer.to_string()).or_default();
        match part {
            "A" => entry.0 = Some(t),
            "B" => entry.1 = Some(t),
            _ => return Err(Error::Format(format!("bad factor record '{name}'"))),
        }
    }
    let mut factors = BTreeMap::new();
    for (layer, (a, b)) in halves {
        let a = a.ok_or_else(|| Error::Format(format!("layer '{layer}' missing A")))?;
        let b = b.ok_or_else(|| Error::Format(format!("layer '{layer}' missing B")))?;
        factors.insert(layer, (a, b));
    }
    if factors.is_empty() {
        return Err(Error::Format("adapter checkpoint has no factors".into()));
    }
    Ok(LoraAdapter::from_parts(config, factors, trained_on, base_version))
}

pub fn save_delta_set(path: &Path, delta: &DeltaSet) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = delta
        .layers()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape(), t.to_vec()))
        .collect();
    atomic_write(
        path,
        &encode_checkpoint(MAGIC_DELTA, &serde_json::json!({}), &tensors),
    )
}

pub fn load_delta_set(path: &Path) -> Result<DeltaSet> {
    let bytes = fs::read(path)?;
    let (_, tensors) = decode_checkpoint(&bytes, MAGIC_DELTA)?;
    let mut layers = BTreeMap::new();
    for (name, shape, data) in tensors {
        layers.insert(name, Tensor::from_vec(data, &shape)?);
    }
    Ok(DeltaSet::from_layers(layers))
}

// ---- datasets ----------------------------------------------------------

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC_DATASET);
    put_u32(&mut buf, FORMAT_VERSION);
    let split = match ds.split {
        Split::Train => "train",
        Split::Heldout => "heldout",
        Split::Test => "test",
    };
    put_string(&mut buf, &serde_json::json!({"id": ds.id, "split": split}).to_string());
    put_u32(&mut buf, ds.samples.len() as u32);
    for s in &ds.samples {
        put_u32(&mut buf, s.tokens.len() as u32);
        for &t in &s.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for &l in &s.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.take(4)?;
    if magic != MAGIC_DATASET {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version > FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {version} is newer than supported {FORMAT_VERSION}"
        )));
    }
    let meta: serde_json::Value =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Serde(e.to_string()))?;
    let id = meta["id"].as_str().unwrap_or_default().to_string();
    let split = match meta["split"].as_str().unwrap_or("train") {
        "heldout" => Split::Heldout,
        "test" => Split::Test,
        _ => Split::Train,
    };
    let n = r.u32()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(r.u16()?);
        }
        for _ in 0..len {
            labels.push(r.u16()?);
        }
        samples.push(Sample { tokens, labels });
    }
    Ok(Dataset { id, split, samples })
}

/// Dump every dataset of the suite plus a human-readable manifest.
pub fn save_suite(dir: &Path, suite: &TaskSuite) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&suite.manifest)
        .map_err(|e| Error::Serde(e.to_string()))?;
    write_text(&dir.join("manifest.json"), &format!("{manifest}\n"))?;
    save_dataset(&dir.join("pretrain-train.clds"), &suite.pretrain_train)?;
    save_dataset(&dir.join("pretrain-heldout.clds"), &suite.pretrain_heldout)?;
    for st in &suite.stream {
        save_dataset(&dir.join(format!("{}-train.clds", st.task.id)), &st.train)?;
        save_dataset(&dir.join(format!("{}-heldout.clds", st.task.id)), &st.heldout)?;
        save_dataset(&dir.join(format!("{}-test.clds", st.task.id)), &st.test)?;
    }
    for ds in &suite.backward_tests {
        save_dataset(&dir.join(format!("{}.clds", ds.id)), ds)?;
    }
    Ok(())
}

// ---- flat tables ---------------------------------------------------------

/// CSV with a header row: snapshot, one column per test set, avg.
pub fn matrix_to_csv(matrix: &MetricsMatrix) -> String {
    let mut out = String::new();
    out.push_str("snapshot");
    for c in &matrix.cols {
        out.push(',');
        out.push_str(c);
    }
    out.push_str(",avg\n");
    for row in &matrix.rows {
        out.push_str(&row.id);
        for v in &row.values {
            out.push(',');
            match v {
                Some(x) => out.push_str(&format!("{x:.6}")),
                None => {}
            }
        }
        out.push_str(&format!(",{:.6}\n", row.avg));
    }
    out
}

pub fn write_matrix_csv(path: &Path, matrix: &MetricsMatrix) -> Result<()> {
    write_text(path, &matrix_to_csv(matrix))
}
