// Micro-profile: raw kernel throughput vs full graph step cost.
// (Development tool.)
use std::time::Instant;
use siesta_core::autograd::{softmax_cross_entropy, Tensor};
use siesta_core::model::{init_model, ModelConfig};
use siesta_core::seed::rng_for;

fn main() {
    // raw matmul_nt throughput at model-typical sizes
    let mut rng = rng_for(1, "prof");
    let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[64, 64], 1.0, &mut rng);
    let t0 = Instant::now();
    let iters = 20000;
    for _ in 0..iters {
        let _ = x.matmul_nt(&w).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = iters as f64 * 16.0 * 64.0 * 64.0;
    println!("matmul_nt 16x64x64 (graphless): {:.2} GMAC/s ({:.1}us/op)", macs / dt / 1e9, dt * 1e6 / iters as f64);

    // head-size matmul
    let h = Tensor::randn(&[192, 64], 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = x.matmul_nt(&h).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = iters as f64 * 16.0 * 64.0 * 192.0;
    println!("matmul_nt 16x64x192 (graphless): {:.2} GMAC/s", macs / dt / 1e9);

    // full model forward/backward
    let cfg = ModelConfig {
        vocab_in: 256, vocab_out: 192, d_model: 64, n_layers: 2, n_heads: 2,
        d_ff: 128, max_seq_len: 32, use_positional: true, seed: 3,
    };
    let kb = init_model(&cfg).unwrap();
    let toks: Vec<u16> = (0..16).map(|i| (i * 13 % 256) as u16).collect();
    let labels: Vec<usize> = (0..16).map(|i| (i * 7 % 192) as usize).collect();

    let t0 = Instant::now();
    let n = 2000;
    for _ in 0..n {
        let _ = kb.forward(&toks, None).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("forward only (no grads): {:.3} ms/sample", dt * 1e3 / n as f64);

    kb.set_trainable(true);
    let params = kb.full_param_set();
    let t0 = Instant::now();
    for _ in 0..n {
        let logits = kb.forward(&toks, None).unwrap();
        let loss = softmax_cross_entropy(&logits, &labels).unwrap();
        loss.backward().unwrap();
        params.zero_grads();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("forward+backward (full params): {:.3} ms/sample", dt * 1e3 / n as f64);

    // batched step, 16 sequences at once
    let seqs: Vec<&[u16]> = (0..16).map(|_| toks.as_slice()).collect();
    let batch_labels: Vec<usize> = (0..16).flat_map(|_| labels.iter().copied()).collect();
    let t0 = Instant::now();
    let nb = 200;
    for _ in 0..nb {
        let logits = kb.forward_batch(&seqs, None).unwrap();
        let loss = softmax_cross_entropy(&logits, &batch_labels).unwrap();
        loss.backward().unwrap();
        params.zero_grads();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("forward+backward batched x16: {:.3} ms/sample", dt * 1e3 / (nb * 16) as f64);
}
