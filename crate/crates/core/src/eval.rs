//! Error metrics and the forward/backward evaluation matrices: token
//! error rate (edit distance over reference length), per-snapshot rows,
//! cumulative risk, and transfer/forgetting summary scores.

use serde::{Deserialize, Serialize};

use crate::autograd::no_grad;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::KnowledgeBase;
use crate::taskgen::Dataset;

/// Levenshtein distance (unit substitution/insertion/deletion costs)
/// divided by the reference length. Can exceed 1 when the hypothesis
/// carries extra insertions.
pub fn token_error_rate(reference: &[u16], hypothesis: &[u16]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("token_error_rate on empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Two-row dynamic program over unit-cost edits.
pub fn edit_distance(a: &[u16], b: &[u16]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut curr = vec![0usize; n + 1];
    for (i, &ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[n]
}

/// Mean token error rate of a model snapshot over one test set.
pub fn dataset_error(
    kb: &KnowledgeBase,
    adapter: Option<&LoraAdapter>,
    test: &Dataset,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract(format!("empty test set '{}'", test.id)));
    }
    let mut total = 0.0f64;
    for chunk in test.samples.chunks(16) {
        let same_len = chunk.iter().all(|s| s.tokens.len() == chunk[0].tokens.len());
        if same_len {
            let seqs: Vec<&[u16]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            let hyps = kb.predict_batch(&seqs, adapter)?;
            for (s, hyp) in chunk.iter().zip(hyps.iter()) {
                total += token_error_rate(&s.labels, hyp)?;
            }
        } else {
            for s in chunk {
                let hyp = kb.predict(&s.tokens, adapter)?;
                total += token_error_rate(&s.labels, &hyp)?;
            }
        }
    }
    Ok(total / test.len() as f64)
}

/// One matrix row: the snapshot's mean error on each test set, in order.
pub fn evaluate_snapshot(
    kb: &KnowledgeBase,
    adapter: Option<&LoraAdapter>,
    tests: &[&Dataset],
) -> Result<Vec<f64>> {
    if tests.is_empty() {
        return Err(Error::Contract("evaluate_snapshot without test sets".into()));
    }
    tests
        .iter()
        .map(|t| dataset_error(kb, adapter, t))
        .collect()
}

/// Sum over seen datasets of the mean per-sample negative log-likelihood
/// (mean over positions). Diagnostic trace of the cumulative objective.
pub fn cumulative_risk(
    kb: &KnowledgeBase,
    adapter: Option<&LoraAdapter>,
    seen: &[&Dataset],
) -> Result<f64> {
    if seen.is_empty() {
        return Err(Error::Contract("cumulative_risk over zero datasets".into()));
    }
    let mut total = 0.0f64;
    for ds in seen {
        if ds.is_empty() {
            return Err(Error::Contract(format!("empty dataset '{}'", ds.id)));
        }
        let mut acc = 0.0f64;
        no_grad(|| -> Result<()> {
            for chunk in ds.samples.chunks(16) {
                let same_len = chunk.iter().all(|s| s.tokens.len() == chunk[0].tokens.len());
                if same_len {
                    let seqs: Vec<&[u16]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
                    let logits = kb.forward_batch(&seqs, adapter)?;
                    let len = chunk[0].labels.len();
                    for (i, s) in chunk.iter().enumerate() {
                        let rows = logits.slice_rows(i * len, len)?;
                        let targets: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
                        acc += crate::autograd::softmax_cross_entropy(&rows, &targets)?.item()? as f64;
                    }
                } else {
                    for s in chunk {
                        let logits = kb.forward(&s.tokens, adapter)?;
                        let targets: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
                        acc += crate::autograd::softmax_cross_entropy(&logits, &targets)?.item()? as f64;
                    }
                }
            }
            Ok(())
        })?;
        total += acc / ds.len() as f64;
    }
    Ok(total)
}

/// Model-snapshot x test-set error table with a per-row average over
/// filled cells.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsMatrix {
    pub cols: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixRow {
    pub id: String,
    pub values: Vec<Option<f64>>,
    pub avg: f64,
}

impl MetricsMatrix {
    pub fn new(cols: Vec<String>) -> MetricsMatrix {
        MetricsMatrix {
            cols,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, id: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.cols.len() {
            return Err(Error::Contract(format!(
                "row '{id}' has {} cells for {} columns",
                values.len(),
                self.cols.len()
            )));
        }
        let avg = Self::avg_of(&values);
        self.rows.push(MatrixRow {
            id: id.to_string(),
            values,
            avg,
        });
        Ok(())
    }

    pub fn push_full_row(&mut self, id: &str, values: Vec<f64>) -> Result<()> {
        self.push_row(id, values.into_iter().map(Some).collect())
    }

    fn avg_of(values: &[Option<f64>]) -> f64 {
        let filled: Vec<f64> = values.iter().flatten().copied().collect();
        if filled.is_empty() {
            f64::NAN
        } else {
            filled.iter().sum::<f64>() / filled.len() as f64
        }
    }

    pub fn row(&self, id: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Recompute every row average from its cells; max abs drift.
    pub fn max_avg_drift(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (Self::avg_of(&r.values) - r.avg).abs())
            .fold(0.0, f64::max)
    }
}

/// Summary transfer scores between a base row and a final model row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferScores {
    /// (avg_base - avg_model) / avg_base on the forward suite; `None` when
    /// the base average is zero (flagged undefined, never NaN).
    pub relative_improvement: Option<f64>,
    /// Same formula on the backward suite.
    pub backward_improvement: Option<f64>,
    /// Per backward test set: final error minus the minimum over all
    /// earlier snapshots (positive = forgetting).
    pub forgetting: Vec<(String, f64)>,
    pub mean_forgetting: f64,
}

fn relative_gain(base: f64, model: f64) -> Option<f64> {
    if base == 0.0 {
        None
    } else {
        Some((base - model) / base)
    }
}

/// Scores from a run's matrices, comparing `final_row` against `base_row`.
pub fn transfer_scores(
    forward: &MetricsMatrix,
    backward: &MetricsMatrix,
    base_row: &str,
    final_row: &str,
) -> Result<TransferScores> {
    let fb = forward
        .row(base_row)
        .ok_or_else(|| Error::Contract(format!("forward matrix missing row '{base_row}'")))?;
    let fm = forward
        .row(final_row)
        .ok_or_else(|| Error::Contract(format!("forward matrix missing row '{final_row}'")))?;
    let bb = backward
        .row(base_row)
        .ok_or_else(|| Error::Contract(format!("backward matrix missing row '{base_row}'")))?;
    let bm = backward
        .row(final_row)
        .ok_or_else(|| Error::Contract(format!("backward matrix missing row '{final_row}'")))?;

    let final_idx = backward
        .rows
        .iter()
        .position(|r| r.id == final_row)
        .expect("row found above");
    let mut forgetting = Vec::new();
    let mut sum = 0.0f64;
    for (c, col) in backward.cols.iter().enumerate() {
        let fin = match bm.values[c] {
            Some(v) => v,
            None => continue,
        };
        let earlier_min = backward.rows[..final_idx]
            .iter()
            .filter_map(|r| r.values[c])
            .fold(f64::INFINITY, f64::min);
        if earlier_min.is_finite() {
            let f = fin - earlier_min;
            sum += f;
            forgetting.push((col.clone(), f));
        }
    }
    let mean_forgetting = if forgetting.is_empty() {
        0.0
    } else {
        sum / forgetting.len() as f64
    };
    Ok(TransferScores {
        relative_improvement: relative_gain(fb.avg, fm.avg),
        backward_improvement: relative_gain(bb.avg, bm.avg),
        forgetting,
        mean_forgetting,
    })
}

/// Externally reported forward averages used to sanity-check the
/// relative-improvement formula: base 39.4 vs merged 28.7.
pub const REFERENCE_BASE_AVG: f64 = 39.4;
pub const REFERENCE_MERGED_AVG: f64 = 28.7;
/// The improvement the external evaluation itself quotes (percent),
/// under its own aggregation and rounding.
pub const REFERENCE_QUOTED_IMPROVEMENT_PCT: f64 = 24.6;

/// The formula result on the reference averages (fraction, ~0.2716) and a
/// note spelling out that it intentionally differs from the quoted 24.6%.
pub fn reference_improvement_note() -> (f64, String) {
    let formula = relative_gain(REFERENCE_BASE_AVG, REFERENCE_MERGED_AVG)
        .expect("nonzero reference base");
    let note = format!(
        "reference check: relative improvement over published averages \
         {REFERENCE_BASE_AVG} -> {REFERENCE_MERGED_AVG} computes to {:.1}% by this \
         harness's formula; the source evaluation quotes {REFERENCE_QUOTED_IMPROVEMENT_PCT}% \
         under its own aggregation and rounding. The two are reported side by side, \
         not equated.",
        formula * 100.0
    );
    (formula, note)
}
