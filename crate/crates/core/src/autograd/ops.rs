//! Differentiable operations. Each op validates shapes, computes its
//! forward value (f64 accumulation for reductions), and records a graph
//! node when tracking is active.

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{grad_enabled, Node, Tensor};

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddBias,
    MatMul,
    MatMulNT,
    Relu,
    LayerNorm {
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    SoftmaxRows,
    GatherRows {
        ids: Vec<usize>,
    },
    SliceCols {
        start: usize,
    },
    SliceRows {
        start: usize,
    },
    ConcatCols,
    ConcatRows,
    SumAll,
    MeanAll,
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    /// Temperature-scaled KL from student to a frozen teacher.
    DistillKl {
        temperature: f32,
        student_probs: Vec<f32>,
        log_ratio: Vec<f32>,
        row_kl: Vec<f64>,
    },
}

fn make(data: Vec<f32>, shape: Vec<usize>, op: Op, inputs: &[&Tensor]) -> Tensor {
    let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let out = Tensor::raw(data, shape, track);
    if track {
        out.attach_node(Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
    }
    out
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(context, &sa, &sb));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(make(data, self.shape(), Op::Add, &[self, rhs]))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Ok(make(data, self.shape(), Op::Sub, &[self, rhs]))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(make(data, self.shape(), Op::Mul, &[self, rhs]))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        make(data, self.shape(), Op::Scale(c), &[self])
    }

    /// Row-broadcast bias add: [m,n] + [n].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bias")?;
        if bias.shape() != [n] {
            return Err(Error::shape("add_bias", &self.shape(), &bias.shape()));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += b[j];
                }
            }
        }
        Ok(make(data, vec![m, n], Op::AddBias, &[self, bias]))
    }

    /// [m,k] . [k,n] -> [m,n]
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape(), &rhs.shape()));
        }
        let mut data = vec![0.0; m * n];
        kernels::mm(&self.data(), &rhs.data(), m, k, n, &mut data);
        Ok(make(data, vec![m, n], Op::MatMul, &[self, rhs]))
    }

    /// [m,k] . [n,k]^T -> [m,n]; the natural layout for `y = x W^T` with
    /// weights stored [d_out, d_in].
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape(), &rhs.shape()));
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_nt(&self.data(), &rhs.data(), m, k, n, &mut data);
        Ok(make(data, vec![m, n], Op::MatMulNT, &[self, rhs]))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        make(data, self.shape(), Op::Relu, &[self])
    }

    /// Row-wise layer norm with learned gain/bias (both shape [n]).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm")?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::shape("layer_norm", &self.shape(), &gain.shape()));
        }
        let mut data = vec![0.0f32; m * n];
        let mut means = vec![0.0f32; m];
        let mut inv_stds = vec![0.0f32; m];
        {
            let x = self.data();
            let g = gain.data();
            let b = bias.data();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = row
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let inv_std = 1.0 / (var + eps as f64).sqrt();
                means[i] = mean as f32;
                inv_stds[i] = inv_std as f32;
                for j in 0..n {
                    let xhat = (row[j] as f64 - mean) * inv_std;
                    data[i * n + j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
                }
            }
        }
        Ok(make(
            data,
            vec![m, n],
            Op::LayerNorm {
                mean: means,
                inv_std: inv_stds,
            },
            &[self, gain, bias],
        ))
    }

    /// Row-wise softmax, max-subtracted, f64 row sums.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut data = vec![0.0f32; m * n];
        {
            let x = self.data();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    let e = (row[j] as f64 - max).exp();
                    out[j] = e as f32;
                    sum += e;
                }
                for v in out.iter_mut() {
                    *v = (*v as f64 / sum) as f32;
                }
            }
        }
        Ok(make(data, vec![m, n], Op::SoftmaxRows, &[self]))
    }

    /// Columns [start, start+width) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + width > n || width == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of {n} columns",
                start + width
            )));
        }
        let mut data = vec![0.0f32; m * width];
        {
            let x = self.data();
            for i in 0..m {
                data[i * width..(i + 1) * width]
                    .copy_from_slice(&x[i * n + start..i * n + start + width]);
            }
        }
        Ok(make(data, vec![m, width], Op::SliceCols { start }, &[self]))
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let data = self.data()[start * n..(start + len) * n].to_vec();
        Ok(make(data, vec![len, n], Op::SliceRows { start }, &[self]))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        make(vec![s as f32], vec![1], Op::SumAll, &[self])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        make(vec![(s / n) as f32], vec![1], Op::MeanAll, &[self])
    }
}

/// Embedding-style row lookup: rows of `table` selected by `ids`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = table.dims2("gather_rows")?;
    if ids.is_empty() {
        return Err(Error::Contract("gather_rows with empty id list".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
        return Err(Error::IndexOutOfRange(format!(
            "row id {bad} out of table with {v} rows"
        )));
    }
    let mut data = vec![0.0f32; ids.len() * d];
    {
        let t = table.data();
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
        }
    }
    Ok(make(
        data,
        vec![ids.len(), d],
        Op::GatherRows { ids: ids.to_vec() },
        &[table],
    ))
}

/// Concatenate 2-D tensors along columns (equal row counts).
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".into()));
    }
    let (m, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0usize;
    for p in parts {
        let (mp, np) = p.dims2("concat_cols")?;
        if mp != m {
            return Err(Error::shape("concat_cols", &parts[0].shape(), &p.shape()));
        }
        widths.push(np);
        total += np;
    }
    let mut data = vec![0.0f32; m * total];
    let mut offset = 0usize;
    for (p, &w) in parts.iter().zip(widths.iter()) {
        let src = p.data();
        for i in 0..m {
            data[i * total + offset..i * total + offset + w]
                .copy_from_slice(&src[i * w..(i + 1) * w]);
        }
        offset += w;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(make(data, vec![m, total], Op::ConcatCols, &refs))
}

/// Stack 2-D tensors vertically (equal column counts).
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_rows of zero tensors".into()));
    }
    let (_, n) = parts[0].dims2("concat_rows")?;
    let mut total = 0usize;
    for p in parts {
        let (mp, np) = p.dims2("concat_rows")?;
        if np != n {
            return Err(Error::shape("concat_rows", &parts[0].shape(), &p.shape()));
        }
        total += mp;
    }
    let mut data = Vec::with_capacity(total * n);
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(make(data, vec![total, n], Op::ConcatRows, &refs))
}

/// Mean over positions of -log softmax(logits)[target], max-subtracted,
/// accumulated in f64.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, v) = logits.dims2("softmax_cross_entropy")?;
    if targets.len() != n || n == 0 {
        return Err(Error::Contract(format!(
            "softmax_cross_entropy: {} targets for {} logit rows",
            targets.len(),
            n
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::IndexOutOfRange(format!(
            "target class {bad} out of {v}"
        )));
    }
    let mut probs = vec![0.0f32; n * v];
    let mut total = 0.0f64;
    {
        let z = logits.data();
        for i in 0..n {
            let row = &z[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for j in 0..v {
                let e = (row[j] as f64 - max).exp();
                probs[i * v + j] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..v {
                probs[i * v + j] = (probs[i * v + j] as f64 * inv) as f32;
            }
            // -log p[target] = lse - z[target]
            total += max + sum.ln() - row[targets[i]] as f64;
        }
    }
    let loss = (total / n as f64) as f32;
    Ok(make(
        vec![loss],
        vec![1],
        Op::SoftmaxCrossEntropy {
            targets: targets.to_vec(),
            probs,
        },
        &[logits],
    ))
}

/// `T^2 * mean_rows KL(softmax(student/T) || softmax(teacher/T))`.
///
/// The teacher is a frozen reference: it must not require gradients.
pub fn distill_kl(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f32) -> Result<Tensor> {
    same_shape("distill_kl", student_logits, teacher_logits)?;
    let (n, v) = student_logits.dims2("distill_kl")?;
    if temperature <= 0.0 {
        return Err(Error::Contract("distill temperature must be > 0".into()));
    }
    if teacher_logits.requires_grad() {
        return Err(Error::Contract(
            "distill_kl teacher must be detached (requires_grad = false)".into(),
        ));
    }
    let t = temperature as f64;
    let mut student_probs = vec![0.0f32; n * v];
    let mut log_ratio = vec![0.0f32; n * v];
    let mut row_kl = vec![0.0f64; n];
    {
        let zs = student_logits.data();
        let zt = teacher_logits.data();
        let mut ls = vec![0.0f64; v];
        let mut lt = vec![0.0f64; v];
        for i in 0..n {
            log_softmax_row(&zs[i * v..(i + 1) * v], t, &mut ls);
            log_softmax_row(&zt[i * v..(i + 1) * v], t, &mut lt);
            let mut kl = 0.0f64;
            for j in 0..v {
                let p = ls[j].exp();
                student_probs[i * v + j] = p as f32;
                log_ratio[i * v + j] = (ls[j] - lt[j]) as f32;
                kl += p * (ls[j] - lt[j]);
            }
            row_kl[i] = kl.max(0.0);
        }
    }
    let loss = (t * t * row_kl.iter().sum::<f64>() / n as f64) as f32;
    Ok(make(
        vec![loss],
        vec![1],
        Op::DistillKl {
            temperature,
            student_probs,
            log_ratio,
            row_kl,
        },
        &[student_logits],
    ))
}

fn log_softmax_row(row: &[f32], temperature: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64 / temperature;
    let mut sum = 0.0f64;
    for (o, &z) in out.iter_mut().zip(row.iter()) {
        let u = z as f64 / temperature - max;
        *o = u;
        sum += u.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// Apply one node's chain rule: scatter `grad` into the node's inputs.
pub(crate) fn backward_step(out: &Tensor, node: &Node, grad: &[f32]) {
    let inputs = &node.inputs;
    match &node.op {
        Op::Add => {
            if inputs[0].requires_grad() {
                inputs[0].add_to_grad(grad);
            }
            if inputs[1].requires_grad() {
                inputs[1].add_to_grad(grad);
            }
        }
        Op::Sub => {
            if inputs[0].requires_grad() {
                inputs[0].add_to_grad(grad);
            }
            if inputs[1].requires_grad() {
                let neg: Vec<f32> = grad.iter().map(|g| -g).collect();
                inputs[1].add_to_grad(&neg);
            }
        }
        Op::Mul => {
            if inputs[0].requires_grad() {
                let d: Vec<f32> = {
                    let y = inputs[1].data();
                    grad.iter().zip(y.iter()).map(|(g, v)| g * v).collect()
                };
                inputs[0].add_to_grad(&d);
            }
            if inputs[1].requires_grad() {
                let d: Vec<f32> = {
                    let x = inputs[0].data();
                    grad.iter().zip(x.iter()).map(|(g, v)| g * v).collect()
                };
                inputs[1].add_to_grad(&d);
            }
        }
        Op::Scale(c) => {
            if inputs[0].requires_grad() {
                let d: Vec<f32> = grad.iter().map(|g| g * c).collect();
                inputs[0].add_to_grad(&d);
            }
        }
        Op::AddBias => {
            let (m, n) = out.dims2("add_bias backward").expect("2-D output");
            if inputs[0].requires_grad() {
                inputs[0].add_to_grad(grad);
            }
            if inputs[1].requires_grad() {
                let mut db = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += grad[i * n + j] as f64;
                    }
                }
                let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                inputs[1].add_to_grad(&db);
            }
        }
        Op::MatMul => {
            // c = a.b: da = g.b^T, db = a^T.g
            let (m, k) = inputs[0].dims2("matmul backward").expect("2-D");
            let (_, n) = inputs[1].dims2("matmul backward").expect("2-D");
            if inputs[0].requires_grad() {
                let mut da = vec![0.0f32; m * k];
                kernels::mm_nt(grad, &inputs[1].data(), m, n, k, &mut da);
                inputs[0].add_to_grad(&da);
            }
            if inputs[1].requires_grad() {
                let mut db = vec![0.0f32; k * n];
                kernels::mm_tn(&inputs[0].data(), grad, m, k, n, &mut db);
                inputs[1].add_to_grad(&db);
            }
        }
        Op::MatMulNT => {
            // c = a.b^T: da = g.b, db = g^T.a
            let (m, k) = inputs[0].dims2("matmul_nt backward").expect("2-D");
            let (n, _) = inputs[1].dims2("matmul_nt backward").expect("2-D");
            if inputs[0].requires_grad() {
                let mut da = vec![0.0f32; m * k];
                kernels::mm(grad, &inputs[1].data(), m, n, k, &mut da);
                inputs[0].add_to_grad(&da);
            }
            if inputs[1].requires_grad() {
                let mut db = vec![0.0f32; n * k];
                kernels::mm_tn(grad, &inputs[0].data(), m, n, k, &mut db);
                inputs[1].add_to_grad(&db);
            }
        }
        Op::Relu => {
            if inputs[0].requires_grad() {
                let d: Vec<f32> = {
                    let x = inputs[0].data();
                    grad.iter()
                        .zip(x.iter())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect()
                };
                inputs[0].add_to_grad(&d);
            }
        }
        Op::LayerNorm { mean, inv_std } => {
            let (m, n) = inputs[0].dims2("layer_norm backward").expect("2-D");
            let x = inputs[0].data();
            let g = inputs[1].data();
            let mut dx = vec![0.0f32; m * n];
            let mut dgain = vec![0.0f64; n];
            let mut dbias = vec![0.0f64; n];
            for i in 0..m {
                let xr = &x[i * n..(i + 1) * n];
                let gr = &grad[i * n..(i + 1) * n];
                let (mu, is) = (mean[i] as f64, inv_std[i] as f64);
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for j in 0..n {
                    let xhat = (xr[j] as f64 - mu) * is;
                    let dxhat = gr[j] as f64 * g[j] as f64;
                    dgain[j] += gr[j] as f64 * xhat;
                    dbias[j] += gr[j] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let m1 = sum_dxhat / n as f64;
                let m2 = sum_dxhat_xhat / n as f64;
                for j in 0..n {
                    let xhat = (xr[j] as f64 - mu) * is;
                    let dxhat = gr[j] as f64 * g[j] as f64;
                    dx[i * n + j] = (is * (dxhat - m1 - xhat * m2)) as f32;
                }
            }
            drop(x);
            drop(g);
            if inputs[0].requires_grad() {
                inputs[0].add_to_grad(&dx);
            }
            if inputs[1].requires_grad() {
                let d: Vec<f32> = dgain.iter().map(|&v| v as f32).collect();
                inputs[1].add_to_grad(&d);
            }
            if inputs[2].requires_grad() {
                let d: Vec<f32> = dbias.iter().map(|&v| v as f32).collect();
                inputs[2].add_to_grad(&d);
            }
        }
        Op::SoftmaxRows => {
            if inputs[0].requires_grad() {
                let (m, n) = out.dims2("softmax backward").expect("2-D");
                let s = out.data();
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let sr = &s[i * n..(i + 1) * n];
                    let gr = &grad[i * n..(i + 1) * n];
                    let dot: f64 = sr
                        .iter()
                        .zip(gr.iter())
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    for j in 0..n {
                        dx[i * n + j] = (sr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                drop(s);
                inputs[0].add_to_grad(&dx);
            }
        }
        Op::GatherRows { ids } => {
            if inputs[0].requires_grad() {
                let (v, d) = inputs[0].dims2("gather backward").expect("2-D");
                let mut dt = vec![0.0f32; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[i * d + j];
                    }
                }
                inputs[0].add_to_grad(&dt);
            }
        }
        Op::SliceCols { start } => {
            if inputs[0].requires_grad() {
                let (m, n) = inputs[0].dims2("slice_cols backward").expect("2-D");
                let (_, w) = out.dims2("slice_cols backward").expect("2-D");
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w]
                        .copy_from_slice(&grad[i * w..(i + 1) * w]);
                }
                inputs[0].add_to_grad(&dx);
            }
        }
        Op::SliceRows { start } => {
            if inputs[0].requires_grad() {
                let (m, n) = inputs[0].dims2("slice_rows backward").expect("2-D");
                let (rows, _) = out.dims2("slice_rows backward").expect("2-D");
                let mut dx = vec![0.0f32; m * n];
                dx[start * n..(start + rows) * n].copy_from_slice(grad);
                inputs[0].add_to_grad(&dx);
            }
        }
        Op::ConcatCols => {
            let (m, total) = out.dims2("concat backward").expect("2-D");
            let mut offset = 0usize;
            for part in inputs {
                let (_, w) = part.dims2("concat backward").expect("2-D");
                if part.requires_grad() {
                    let mut dp = vec![0.0f32; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                    }
                    part.add_to_grad(&dp);
                }
                offset += w;
            }
        }
        Op::ConcatRows => {
            let (_, n) = out.dims2("concat_rows backward").expect("2-D");
            let mut offset = 0usize;
            for part in inputs {
                let (mp, _) = part.dims2("concat_rows backward").expect("2-D");
                if part.requires_grad() {
                    part.add_to_grad(&grad[offset * n..(offset + mp) * n]);
                }
                offset += mp;
            }
        }
        Op::SumAll => {
            if inputs[0].requires_grad() {
                let d = vec![grad[0]; inputs[0].numel()];
                inputs[0].add_to_grad(&d);
            }
        }
        Op::MeanAll => {
            if inputs[0].requires_grad() {
                let n = inputs[0].numel();
                let d = vec![grad[0] / n as f32; n];
                inputs[0].add_to_grad(&d);
            }
        }
        Op::SoftmaxCrossEntropy { targets, probs } => {
            if inputs[0].requires_grad() {
                let n = targets.len();
                let v = probs.len() / n;
                let scale = grad[0] as f64 / n as f64;
                let mut dz = vec![0.0f32; n * v];
                for i in 0..n {
                    for j in 0..v {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dz[i * v + j] = (scale * (probs[i * v + j] as f64 - onehot)) as f32;
                    }
                }
                inputs[0].add_to_grad(&dz);
            }
        }
        Op::DistillKl {
            temperature,
            student_probs,
            log_ratio,
            row_kl,
        } => {
            if inputs[0].requires_grad() {
                let n = row_kl.len();
                let v = student_probs.len() / n;
                let t = *temperature as f64;
                let scale = grad[0] as f64 * t / n as f64;
                let mut dz = vec![0.0f32; n * v];
                for i in 0..n {
                    for j in 0..v {
                        let p = student_probs[i * v + j] as f64;
                        let lr = log_ratio[i * v + j] as f64;
                        dz[i * v + j] = (scale * p * (lr - row_kl[i])) as f32;
                    }
                }
                inputs[0].add_to_grad(&dz);
            }
        }
    }
}
