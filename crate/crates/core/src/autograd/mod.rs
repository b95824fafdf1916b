//! Dense tensor arithmetic with reverse-mode automatic differentiation,
//! sized for a tiny transformer: 32-bit storage, 64-bit accumulation in
//! every reduction, deterministic single-threaded execution.

mod kernels;
mod ops;
mod optim;
mod tensor;

pub use ops::{concat_cols, concat_rows, distill_kl, gather_rows, softmax_cross_entropy};
pub use optim::{sgd_step, ParamSet, SgdConfig};
pub use tensor::{grad_enabled, no_grad, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn assert_close(a: f32, b: f32, tol: f32) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity_passthrough() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let c = a.matmul(&eye).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);

        // randomized sizes against the naive triple loop
        use rand::Rng;
        let mut rng = rng_for(5, "matmul-oracle");
        for _ in 0..10 {
            let (m, k, n) = (
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..6),
            );
            let av: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bv: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut want = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for p in 0..k {
                        s += av[i * k + p] as f64 * bv[p * n + j] as f64;
                    }
                    want[i * n + j] = s as f32;
                }
            }
            let got = Tensor::from_vec(av, &[m, k])
                .unwrap()
                .matmul(&Tensor::from_vec(bv, &[k, n]).unwrap())
                .unwrap();
            assert_eq!(got.to_vec(), want);
        }
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Tensor::from_vec(vec![1.0, -2.0, 3.5, 4.0, 0.25, -1.0], &[2, 3]).unwrap();
        let z = Tensor::zeros(&[3, 4]);
        let c = a.matmul(&z).unwrap();
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let logits = Tensor::zeros(&[1, 4]);
        let loss = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert_close(loss.item().unwrap(), (4.0f32).ln(), 1e-6);
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        // -log softmax([10,0,0])[0] = ln(1 + 2 e^-10)
        let logits = Tensor::from_vec(vec![10.0, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        let expect = (1.0f64 + 2.0 * (-10.0f64).exp()).ln() as f32;
        assert_close(loss.item().unwrap(), expect, 1e-9);
        assert_close(loss.item().unwrap(), 9.08e-5, 1e-6);
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let logits = Tensor::from_vec(vec![0.3, -0.7, 1.2, 0.0, 0.5, -0.1], &[2, 3]).unwrap();
        logits.set_requires_grad(true);
        let loss = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();

        let z = logits.to_vec();
        for i in 0..2 {
            let row = &z[i * 3..(i + 1) * 3];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for j in 0..3 {
                let p = (row[j] as f64 - max).exp() / sum;
                let onehot = if (i == 0 && j == 2) || (i == 1 && j == 0) {
                    1.0
                } else {
                    0.0
                };
                let want = ((p - onehot) / 2.0) as f32;
                assert_close(g[i * 3 + j], want, 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(crate::Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        x.set_requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_on_constant_writes_no_grads() {
        let c = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let loss = c.sum_all();
        loss.backward().unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2, 2]);
        x.set_requires_grad(true);
        let y = x.relu();
        assert!(matches!(y.backward(), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backward_clears_graph_and_accumulates_fanout() {
        let x = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        x.set_requires_grad(true);
        // loss = x*x + x => dl/dx = 2x + 1 = 7
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
        // graph cleared: second backward is a no-op on a now-node-less loss
        x.zero_grad();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::Rng;
        let mut rng = rng_for(9, "softmax");
        let data: Vec<f32> = (0..8 * 17).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let s = Tensor::from_vec(data, &[8, 17])
            .unwrap()
            .softmax_rows()
            .unwrap();
        let v = s.to_vec();
        for i in 0..8 {
            let sum: f32 = v[i * 17..(i + 1) * 17].iter().sum();
            assert_close(sum, 1.0, 1e-6);
        }
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        x.set_requires_grad(true);
        let y = no_grad(|| x.mul(&x).unwrap().sum_all());
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn sgd_update_rule() {
        let w = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        w.set_requires_grad(true);
        w.set_grad(Some(vec![0.5]));
        let params = ParamSet {
            decayed: vec![("w".into(), w.clone())],
            plain: vec![],
        };
        sgd_step(
            &params,
            &SgdConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                grad_clip_norm: None,
            },
        )
        .unwrap();
        assert_close(w.to_vec()[0], 0.95, 1e-7);
        assert!(w.grad().is_none(), "grads cleared after step");
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let w = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        w.set_requires_grad(true);
        w.set_grad(Some(vec![0.0]));
        let params = ParamSet {
            decayed: vec![("w".into(), w.clone())],
            plain: vec![],
        };
        sgd_step(
            &params,
            &SgdConfig {
                learning_rate: 0.1,
                weight_decay: 0.1,
                grad_clip_norm: None,
            },
        )
        .unwrap();
        assert_close(w.to_vec()[0], 0.99, 1e-7);

        // with zero grad and positive decay, |w| strictly decreases each step
        let mut prev = 0.99f32;
        for _ in 0..5 {
            w.set_grad(Some(vec![0.0]));
            sgd_step(
                &params,
                &SgdConfig {
                    learning_rate: 0.1,
                    weight_decay: 0.1,
                    grad_clip_norm: None,
                },
            )
            .unwrap();
            let cur = w.to_vec()[0];
            assert!(cur.abs() < prev.abs());
            prev = cur;
        }
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_fixed_point() {
        let w = Tensor::from_vec(vec![0.37], &[1]).unwrap();
        w.set_requires_grad(true);
        w.set_grad(Some(vec![0.0]));
        let params = ParamSet {
            decayed: vec![("w".into(), w.clone())],
            plain: vec![],
        };
        sgd_step(
            &params,
            &SgdConfig {
                learning_rate: 0.5,
                weight_decay: 0.0,
                grad_clip_norm: Some(1.0),
            },
        )
        .unwrap();
        assert_eq!(w.to_vec()[0], 0.37);
    }

    #[test]
    fn sgd_missing_grad_is_contract_error() {
        let w = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        w.set_requires_grad(true);
        let params = ParamSet {
            decayed: vec![("w".into(), w)],
            plain: vec![],
        };
        assert!(matches!(
            sgd_step(&params, &SgdConfig::default()),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn sgd_clips_global_norm() {
        let w1 = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        let w2 = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        w1.set_requires_grad(true);
        w2.set_requires_grad(true);
        w1.set_grad(Some(vec![3.0]));
        w2.set_grad(Some(vec![4.0])); // global norm 5
        let params = ParamSet {
            decayed: vec![("a".into(), w1.clone()), ("b".into(), w2.clone())],
            plain: vec![],
        };
        sgd_step(
            &params,
            &SgdConfig {
                learning_rate: 1.0,
                weight_decay: 0.0,
                grad_clip_norm: Some(1.0),
            },
        )
        .unwrap();
        // rescaled grads: (0.6, 0.8)
        assert_close(w1.to_vec()[0], -0.6, 1e-6);
        assert_close(w2.to_vec()[0], -0.8, 1e-6);
    }

    #[test]
    fn deterministic_forward_same_inputs() {
        use rand::Rng;
        let mut rng = rng_for(21, "det");
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let ta = Tensor::from_vec(a.clone(), &[3, 4]).unwrap();
            let tb = Tensor::from_vec(b.clone(), &[4, 3]).unwrap();
            ta.matmul(&tb)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn distill_kl_zero_when_logits_equal_and_nonnegative() {
        use rand::Rng;
        let mut rng = rng_for(33, "kl");
        let data: Vec<f32> = (0..4 * 7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = Tensor::from_vec(data.clone(), &[4, 7]).unwrap();
        let t = Tensor::from_vec(data, &[4, 7]).unwrap();
        let kl = distill_kl(&s, &t, 2.0).unwrap();
        assert!(kl.item().unwrap().abs() < 1e-9);

        for _ in 0..5 {
            let sd: Vec<f32> = (0..4 * 7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let td: Vec<f32> = (0..4 * 7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s = Tensor::from_vec(sd, &[4, 7]).unwrap();
            let t = Tensor::from_vec(td, &[4, 7]).unwrap();
            assert!(distill_kl(&s, &t, 2.0).unwrap().item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn finite_difference_spot_checks() {
        // Direct f32 finite differences on small composite graphs. The
        // full-model check against an f64 reference lives in tests/.
        use rand::Rng;
        let mut rng = rng_for(77, "fd");
        let x0: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |xv: &[f32], wv: &[f32]| -> f32 {
            let x = Tensor::from_vec(xv.to_vec(), &[2, 3]).unwrap();
            let w = Tensor::from_vec(wv.to_vec(), &[2, 3]).unwrap();
            let y = x.matmul_nt(&w).unwrap().softmax_rows().unwrap();
            softmax_cross_entropy(&y.matmul(&w).unwrap(), &[0, 2])
                .unwrap()
                .item()
                .unwrap()
        };

        let x = Tensor::from_vec(x0.clone(), &[2, 3]).unwrap();
        let w = Tensor::from_vec(w0.clone(), &[2, 3]).unwrap();
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        let y = x.matmul_nt(&w).unwrap().softmax_rows().unwrap();
        let loss = softmax_cross_entropy(&y.matmul(&w).unwrap(), &[0, 2]).unwrap();
        loss.backward().unwrap();
        let gx = x.grad().unwrap();

        let h = 1e-2f32;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[i] += h;
            minus[i] -= h;
            let num = (eval(&plus, &w0) - eval(&minus, &w0)) / (2.0 * h);
            assert!(
                (num - gx[i]).abs() < 2e-3,
                "coord {i}: numeric {num} vs analytic {}",
                gx[i]
            );
        }
    }
}
