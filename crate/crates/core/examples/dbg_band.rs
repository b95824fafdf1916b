use siesta_core::config::RunConfig;
use siesta_core::pipeline::{build_suite, pretrain};

fn main() {
    for seed in [7u64, 42] {
        let mut cfg = RunConfig::default();
        cfg.master_seed = seed;
        let suite = build_suite(&cfg).unwrap();
        let out = pretrain(&cfg, &suite).unwrap();
        println!("seed {seed}: steps {} stopped_early {}", out.log.steps, out.log.stopped_early);
        println!("  probe trace: {:?}", out.log.heldout_errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>());
        println!("  backward cells: {:?}", out.backward_errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>());
    }
}
