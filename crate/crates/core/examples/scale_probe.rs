// Measures how a single trained adapter's benefit and damage scale when
// its composed delta is merged at fractional strength.
// (Development tool.)

use siesta_core::config::RunConfig;
use siesta_core::continual::train_adapter;
use siesta_core::eval::evaluate_snapshot;
use siesta_core::lora::{compose_delta, lora_merge};
use siesta_core::pipeline::{build_suite, pretrain, stream_schedule};

fn mean(v: &[f64]) -> f64 { v.iter().sum::<f64>() / v.len() as f64 }

fn main() {
    let mut cfg = RunConfig::default();
    cfg.suite.pretrain_per_lang = 200;
    cfg.suite.train_size = 400;
    cfg.schedule.epochs_per_dataset = 8;
    let suite = build_suite(&cfg).unwrap();
    let out = pretrain(&cfg, &suite).unwrap();
    println!("base backward mean {:.4}", mean(&out.backward_errors));

    let schedule = stream_schedule(&cfg, &suite);
    let st = &suite.stream[0];
    let (adapter, log) = train_adapter(&out.kb, &st.train, &st.heldout, &schedule, 12345).unwrap();
    println!("adapter heldout trace {:?}", log.heldout_errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>());
    let delta = compose_delta(&adapter);
    println!("delta frobenius {:.3}", delta.frobenius_norm());

    let own_test = [&st.test];
    let bwd = suite.backward_test_refs();
    let base_own = evaluate_snapshot(&out.kb, None, &own_test).unwrap()[0];
    println!("base own-task fwd {base_own:.4}");
    let active = evaluate_snapshot(&out.kb, Some(&adapter), &own_test).unwrap()[0];
    println!("adapter-active own-task fwd {active:.4}");

    for c in [1.0f32, 0.75, 0.5, 1.0/3.0, 0.25, 1.0/6.0] {
        let merged = lora_merge(&out.kb, &delta.scaled(c)).unwrap();
        let own = evaluate_snapshot(&merged, None, &own_test).unwrap()[0];
        let b = mean(&evaluate_snapshot(&merged, None, &bwd).unwrap());
        println!("scale {c:.3}: own-task fwd {own:.4}  backward mean {b:.4}");
    }
}
