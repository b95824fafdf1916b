// Scratch calibration harness: times pretraining and probes whether the
// code-switch stream produces learnable forward tasks, forgetting
// pressure, and centralization recovery at the current defaults.
// (Development tool; run with: cargo run --release -p siesta-core --example calibrate)

use std::time::Instant;

use siesta_core::config::RunConfig;
use siesta_core::continual::run_stream;
use siesta_core::eval::evaluate_snapshot;
use siesta_core::pipeline::{build_suite, pretrain, stream_schedule};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    let mut cfg = RunConfig::default();
    // smaller run for timing probes
    if std::env::args().any(|a| a == "--small") {
        cfg.suite.pretrain_per_lang = 200;
        cfg.suite.train_size = 400;
        cfg.schedule.epochs_per_dataset = 8;
    }
    let t0 = Instant::now();
    let suite = build_suite(&cfg).unwrap();
    println!("suite built: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let out = pretrain(&cfg, &suite).unwrap();
    println!(
        "pretrain: {:?}, epochs {} steps {} heldout {:?}",
        t0.elapsed(),
        out.log.epoch_losses.len(),
        out.log.steps,
        out.log.heldout_errors
    );
    let base_bwd = mean(&out.backward_errors);
    println!("backward errors: {:?} (mean {base_bwd:.4})", out.backward_errors);

    // forward baseline on stream tests
    let fwd_tests = suite.forward_tests();
    let base_fwd = evaluate_snapshot(&out.kb, None, &fwd_tests).unwrap();
    println!("base forward: {:?} (mean {:.4})", base_fwd, mean(&base_fwd));

    // one full centralized stream
    let t0 = Instant::now();
    let mut schedule = stream_schedule(&cfg, &suite);
    if std::env::args().any(|a| a == "--original") {
        schedule.merge_base = siesta_core::continual::MergeBase::Original;
        println!("merge base: original");
    }
    let report = run_stream(&out.kb, &schedule, &suite, cfg.master_seed, None).unwrap();
    println!("centralized stream: {:?}", t0.elapsed());
    for row in &report.forward.rows {
        println!("fwd  {:24} avg {:.4} cells {:?}", row.id, row.avg,
            row.values.iter().map(|v| format!("{:.3}", v.unwrap())).collect::<Vec<_>>());
    }
    for row in &report.backward.rows {
        println!("bwd  {:24} avg {:.4} cells {:?}", row.id, row.avg,
            row.values.iter().map(|v| format!("{:.3}", v.unwrap())).collect::<Vec<_>>());
    }
    for log in &report.training {
        println!(
            "train {:22} epochs {:2} steps {:4} first {:.3} last {:.3} heldout {:?}",
            log.dataset,
            log.epoch_losses.len(),
            log.steps,
            log.epoch_losses.first().unwrap_or(&f64::NAN),
            log.epoch_losses.last().unwrap_or(&f64::NAN),
            log.heldout_errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
        );
    }
    for e in &report.merge_history {
        println!("merge at t={} sparsity {:.4} norm {:.4}", e.step, e.sparsity, e.delta_norm);
    }
}
