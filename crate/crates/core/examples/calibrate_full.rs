// Full-pipeline calibration: all four methods across seeds, with the
// acceptance orderings checked. (Development tool.)

use std::time::Instant;

use siesta_core::config::RunConfig;
use siesta_core::pipeline::{build_suite, pretrain, run_method, Method};

fn mean(v: &[f64]) -> f64 { v.iter().sum::<f64>() / v.len() as f64 }

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seeds = if seeds.is_empty() { vec![42] } else { seeds };

    for seed in seeds {
        let t0 = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.master_seed = seed;
        let suite = build_suite(&cfg).unwrap();
        let out = pretrain(&cfg, &suite).unwrap();
        let base_bwd = mean(&out.backward_errors);
        println!("== seed {seed}: pretrain {:.1}s steps {} base_bwd {:.4} cells {:?}",
            t0.elapsed().as_secs_f64(), out.log.steps, base_bwd,
            out.backward_errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>());

        let mut results = std::collections::BTreeMap::new();
        for m in Method::ALL {
            let t1 = Instant::now();
            let rep = run_method(&cfg, m, &out.kb, &suite, None).unwrap();
            let f = rep.forward.row(&rep.final_row).unwrap().avg;
            let b = rep.backward.row(&rep.final_row).unwrap().avg;
            println!("  {:12} {:6.1}s final fwd {:.4} bwd {:.4}", m.as_str(), t1.elapsed().as_secs_f64(), f, b);
            results.insert(m.as_str().to_string(), rep);
        }

        let cent = &results["centralized"];
        let base_fwd = cent.forward.row("base").unwrap().avg;
        let c_fwd = cent.forward.row(&cent.final_row).unwrap().avg;
        let c_bwd = cent.backward.row(&cent.final_row).unwrap().avg;
        let ceil_fwd = results["ceiling"].forward.row("ceiling").unwrap().avg;
        let naive_bwd = {
            let r = &results["naive"];
            r.backward.row(&r.final_row).unwrap().avg
        };
        let swadt_bwd = {
            let r = &results["swadt"];
            r.backward.row(&r.final_row).unwrap().avg
        };

        // criterion 6: adapters >= 3x base on >= 4/6
        let adapters: Vec<f64> = cent.backward.rows.iter()
            .filter(|r| r.id.starts_with("adapter:"))
            .map(|r| r.avg).collect();
        let dirty = adapters.iter().filter(|&&a| a >= 3.0 * base_bwd).count();
        // criterion 7
        let cents: Vec<f64> = cent.backward.rows.iter()
            .filter(|r| r.id.starts_with("centralized:"))
            .map(|r| r.avg).collect();
        let min_adapter = adapters.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("  c5 base cells < 0.02: {}", out.backward_errors.iter().all(|&e| e < 0.02));
        println!("  c6 dirty {dirty}/6 (threshold {:.4}, adapters {:?})", 3.0*base_bwd,
            adapters.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>());
        println!("  c7 cents {:?} <= {:.4}: {}  strictly < min adapter {:.4}: {}",
            cents.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>(), 1.5*base_bwd,
            cents.iter().all(|&c| c <= 1.5*base_bwd), min_adapter,
            cents.iter().all(|&c| c < min_adapter));
        println!("  c8 fwd: ceiling {ceil_fwd:.4} <= cent {c_fwd:.4} <= base {base_fwd:.4}: {}",
            ceil_fwd <= c_fwd && c_fwd <= base_fwd);
        println!("  c8 bwd: cent {c_bwd:.4} <= naive {naive_bwd:.4}: {} ; <= swadt {swadt_bwd:.4}*1.2: {}",
            c_bwd <= naive_bwd, c_bwd <= swadt_bwd * 1.2);
        println!("  total {:.1}s", t0.elapsed().as_secs_f64());
    }
}
