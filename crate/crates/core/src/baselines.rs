//! Comparison systems: naive sequential fine-tuning of a single adapter,
//! the same with per-step EMA weight averaging plus distillation against
//! the frozen pre-dataset snapshot (SWADT), and the pooled multitask
//! ceiling.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::continual::{
    ema_update, fit_adapter, save_adapter_checkpoint, save_kb_checkpoint, DistillSpec, EvalContext,
    FitOptions, StreamSchedule, SPARSITY_EPS,
};
use crate::error::{Error, Result};
use crate::lora::{compose_delta, init_adapter, LoraAdapter};
use crate::model::KnowledgeBase;
use crate::report::RunReport;
use crate::seed::sub_seed;
use crate::taskgen::{Dataset, Split, TaskSuite};

fn default_beta() -> f32 {
    0.995
}
fn default_lambda() -> f32 {
    1.0
}
fn default_temperature() -> f32 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwadtConfig {
    #[serde(default = "default_beta")]
    pub ema_beta: f32,
    #[serde(default = "default_lambda")]
    pub distill_weight: f32,
    #[serde(default = "default_temperature")]
    pub distill_temperature: f32,
}

impl Default for SwadtConfig {
    fn default() -> Self {
        SwadtConfig {
            ema_beta: default_beta(),
            distill_weight: default_lambda(),
            distill_temperature: default_temperature(),
        }
    }
}

impl SwadtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!(
                "ema_beta must be in [0,1], got {}",
                self.ema_beta
            )));
        }
        if !(self.distill_weight >= 0.0) {
            return Err(Error::Config("distill_weight must be >= 0".into()));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::Config("distill_temperature must be > 0".into()));
        }
        Ok(())
    }
}

enum SeqVariant<'a> {
    Naive,
    Swadt(&'a SwadtConfig),
}

/// Sequential fine-tuning of one adapter across the stream. The SWADT
/// variant keeps an EMA shadow of the factors (updated every step) and
/// adds temperature-scaled KL against the frozen pre-dataset snapshot;
/// evaluation then uses the shadow.
fn run_sequential(
    kb0: &KnowledgeBase,
    schedule: &StreamSchedule,
    suite: &TaskSuite,
    master_seed: u64,
    out_dir: Option<&Path>,
    variant: SeqVariant,
) -> Result<RunReport> {
    schedule.validate()?;
    let start = Instant::now();
    let (method, schedule_echo) = match &variant {
        SeqVariant::Naive => ("naive", serde_json::to_value(schedule)),
        SeqVariant::Swadt(cfg) => {
            cfg.validate()?;
            (
                "swadt",
                serde_json::to_value(serde_json::json!({
                    "schedule": schedule,
                    "swadt": cfg,
                })),
            )
        }
    };
    let ctx = EvalContext::new(suite, &schedule.datasets)?;
    let mut report = RunReport::new(
        method,
        &suite.manifest.fingerprint,
        master_seed,
        schedule_echo.map_err(|e| Error::Serde(e.to_string()))?,
        ctx.forward_cols(),
        ctx.backward_cols(),
    );

    let kb = kb0.deep_clone();
    kb.set_trainable(false);
    ctx.snapshot(&mut report, "base", &kb, None, 0)?;
    save_kb_checkpoint(out_dir, &mut report, "base", "kb_base", &kb)?;

    let adapter = init_adapter(&kb, &schedule.lora, "sequential", sub_seed(master_seed, "seq/adapter"))?;
    let shadow = match &variant {
        SeqVariant::Swadt(_) => Some(adapter.deep_clone()),
        SeqVariant::Naive => None,
    };

    for (i, ds_id) in schedule.datasets.iter().enumerate() {
        let t = i + 1;
        let task = suite.stream_task(ds_id)?;
        let fit_seed = sub_seed(master_seed, &format!("seq/{ds_id}"));

        let teacher = match &variant {
            SeqVariant::Swadt(_) => Some(adapter.deep_clone()),
            SeqVariant::Naive => None,
        };
        let opts = FitOptions {
            epochs: schedule.epochs_per_dataset,
            batch_size: schedule.batch_size,
            sgd: schedule.sgd.clone(),
            patience: schedule.early_stop_patience,
            distill: match (&variant, &teacher) {
                (SeqVariant::Swadt(cfg), Some(teacher)) => Some(DistillSpec {
                    teacher,
                    lambda: cfg.distill_weight,
                    temperature: cfg.distill_temperature,
                }),
                _ => None,
            },
            ema: match (&variant, &shadow) {
                (SeqVariant::Swadt(cfg), Some(shadow)) => Some((cfg.ema_beta, shadow)),
                _ => None,
            },
        };
        let log = fit_adapter(&kb, &adapter, &task.train, &task.heldout, &opts, fit_seed)?;
        report.training.push(log);

        // evaluation model: EMA shadow for swadt, raw adapter otherwise
        let eval_adapter: &LoraAdapter = shadow.as_ref().unwrap_or(&adapter);
        report
            .adapter_sparsity
            .push((ds_id.clone(), compose_delta(eval_adapter).sparsity(SPARSITY_EPS)?));
        let row = format!("after:{ds_id}");
        ctx.snapshot(&mut report, &row, &kb, Some(eval_adapter), t)?;
        save_adapter_checkpoint(out_dir, &mut report, &row, t, eval_adapter)?;
    }

    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        crate::report::save_report(dir, &report)?;
    }
    Ok(report)
}

/// Forgetting control: one adapter fine-tuned through every dataset in
/// order, no stabilizer beyond weight decay, snapshots after each dataset.
pub fn naive_sequential(
    kb0: &KnowledgeBase,
    schedule: &StreamSchedule,
    suite: &TaskSuite,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    run_sequential(kb0, schedule, suite, master_seed, out_dir, SeqVariant::Naive)
}

/// EMA weight averaging plus rehearsal-free distillation from the frozen
/// pre-dataset snapshot; evaluation uses the EMA weights.
pub fn swadt_run_stream(
    kb0: &KnowledgeBase,
    schedule: &StreamSchedule,
    suite: &TaskSuite,
    cfg: &SwadtConfig,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    run_sequential(
        kb0,
        schedule,
        suite,
        master_seed,
        out_dir,
        SeqVariant::Swadt(cfg),
    )
}

/// Performance ceiling: one adapter trained on the shuffled union of all
/// stream datasets at once.
pub fn multitask_ceiling(
    kb0: &KnowledgeBase,
    schedule: &StreamSchedule,
    suite: &TaskSuite,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    schedule.validate()?;
    let start = Instant::now();
    let ctx = EvalContext::new(suite, &schedule.datasets)?;
    let mut report = RunReport::new(
        "ceiling",
        &suite.manifest.fingerprint,
        master_seed,
        serde_json::to_value(schedule).map_err(|e| Error::Serde(e.to_string()))?,
        ctx.forward_cols(),
        ctx.backward_cols(),
    );

    let kb = kb0.deep_clone();
    kb.set_trainable(false);
    ctx.snapshot(&mut report, "base", &kb, None, 0)?;
    save_kb_checkpoint(out_dir, &mut report, "base", "kb_base", &kb)?;

    let mut pooled_train = Vec::new();
    let mut pooled_heldout = Vec::new();
    for ds_id in &schedule.datasets {
        let task = suite.stream_task(ds_id)?;
        pooled_train.extend(task.train.samples.iter().cloned());
        pooled_heldout.extend(task.heldout.samples.iter().cloned());
    }
    let pooled_train = Dataset {
        id: "pooled".into(),
        split: Split::Train,
        samples: pooled_train,
    };
    let pooled_heldout = Dataset {
        id: "pooled-heldout".into(),
        split: Split::Heldout,
        samples: pooled_heldout,
    };

    let adapter = init_adapter(
        &kb,
        &schedule.lora,
        "pooled",
        sub_seed(master_seed, "ceiling/adapter"),
    )?;
    let opts = FitOptions {
        epochs: schedule.epochs_per_dataset,
        batch_size: schedule.batch_size,
        sgd: schedule.sgd.clone(),
        patience: schedule.early_stop_patience,
        distill: None,
        ema: None,
    };
    let log = fit_adapter(
        &kb,
        &adapter,
        &pooled_train,
        &pooled_heldout,
        &opts,
        sub_seed(master_seed, "ceiling/fit"),
    )?;
    report.training.push(log);
    report
        .adapter_sparsity
        .push(("pooled".into(), compose_delta(&adapter).sparsity(SPARSITY_EPS)?));

    ctx.snapshot(&mut report, "ceiling", &kb, Some(&adapter), schedule.datasets.len())?;
    save_adapter_checkpoint(out_dir, &mut report, "ceiling", 1, &adapter)?;

    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        crate::report::save_report(dir, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{SgdConfig, Tensor};
    use crate::continual::MergeBase;
    use crate::lora::LoraConfig;
    use crate::model::{init_model, ModelConfig};
    use crate::taskgen::{make_suite, SuiteSpec};
    use std::collections::BTreeMap;

    fn mini_model(seed: u64) -> KnowledgeBase {
        init_model(&ModelConfig {
            vocab_in: 256,
            vocab_out: 192,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 12,
            use_positional: true,
            seed,
        })
        .unwrap()
    }

    fn mini_suite(seed: u64) -> TaskSuite {
        make_suite(
            &SuiteSpec {
                pretrain_per_lang: 20,
                train_size: 30,
                heldout_size: 8,
                test_size: 10,
                seq_len: 8,
                ..SuiteSpec::default()
            },
            seed,
        )
        .unwrap()
    }

    fn mini_schedule(suite: &TaskSuite, epochs: usize) -> StreamSchedule {
        StreamSchedule {
            datasets: suite.stream_ids(),
            k: 3,
            epochs_per_dataset: epochs,
            batch_size: 8,
            sgd: SgdConfig {
                learning_rate: 0.5,
                weight_decay: 1e-3,
                grad_clip_norm: Some(1.0),
            },
            lora: LoraConfig::default(),
            merge_base: MergeBase::Current,
            early_stop_patience: 2,
        }
    }

    /// 1x1 adapter so EMA arithmetic can be checked against closed form.
    fn scalar_adapter(a0: f32, b0: f32) -> LoraAdapter {
        let mut factors = BTreeMap::new();
        factors.insert(
            "w".to_string(),
            (
                Tensor::from_vec(vec![a0], &[1, 1]).unwrap(),
                Tensor::from_vec(vec![b0], &[1, 1]).unwrap(),
            ),
        );
        LoraAdapter::from_parts(
            LoraConfig {
                rank: 1,
                alpha: 1.0,
                init_sigma: 0.02,
                target_layers: vec!["w".into()],
            },
            factors,
            "probe".into(),
            0,
        )
    }

    fn factor_a(ad: &LoraAdapter) -> f32 {
        ad.factors()["w"].0.to_vec()[0]
    }

    #[test]
    fn ema_beta_one_is_a_fixed_point() {
        let shadow = scalar_adapter(0.7, 0.0);
        let student = scalar_adapter(0.0, 0.0);
        for step in 1..=5 {
            student.factors()["w"].0.data_mut()[0] = step as f32;
            ema_update(&shadow, &student, 1.0).unwrap();
        }
        assert_eq!(factor_a(&shadow), 0.7);
    }

    #[test]
    fn ema_beta_zero_tracks_student_exactly() {
        let shadow = scalar_adapter(0.7, 0.0);
        let student = scalar_adapter(0.0, 0.0);
        for step in 1..=5 {
            let v = step as f32 * 0.3 - 1.0;
            student.factors()["w"].0.data_mut()[0] = v;
            ema_update(&shadow, &student, 0.0).unwrap();
            assert_eq!(factor_a(&shadow), v);
        }
    }

    #[test]
    fn ema_half_beta_sequence() {
        // swa_0 = 0; theta = 1 then 2 -> swa = 0.5 then 1.25
        let shadow = scalar_adapter(0.0, 0.0);
        let student = scalar_adapter(0.0, 0.0);
        student.factors()["w"].0.data_mut()[0] = 1.0;
        ema_update(&shadow, &student, 0.5).unwrap();
        assert!((factor_a(&shadow) - 0.5).abs() < 1e-7);
        student.factors()["w"].0.data_mut()[0] = 2.0;
        ema_update(&shadow, &student, 0.5).unwrap();
        assert!((factor_a(&shadow) - 1.25).abs() < 1e-7);
    }

    #[test]
    fn ema_matches_closed_form_on_scalar_probes() {
        let beta = 0.8f64;
        let thetas = [0.3f64, -0.5, 1.1, 0.9, -0.2, 0.4];
        let shadow = scalar_adapter(0.25, 0.0);
        let student = scalar_adapter(0.0, 0.0);
        for &th in &thetas {
            student.factors()["w"].0.data_mut()[0] = th as f32;
            ema_update(&shadow, &student, beta as f32).unwrap();
        }
        let n = thetas.len();
        let mut want = beta.powi(n as i32) * 0.25;
        for (i, &th) in thetas.iter().enumerate() {
            want += (1.0 - beta) * beta.powi((n - 1 - i) as i32) * th;
        }
        assert!(
            (factor_a(&shadow) as f64 - want).abs() < 1e-5,
            "{} vs {want}",
            factor_a(&shadow)
        );
    }

    #[test]
    fn swadt_with_null_knobs_is_bit_identical_to_naive() {
        let kb = mini_model(3);
        let suite = mini_suite(4);
        let mut schedule = mini_schedule(&suite, 2);
        schedule.datasets.truncate(3);
        let cfg = SwadtConfig {
            ema_beta: 0.0,
            distill_weight: 0.0,
            distill_temperature: 2.0,
        };
        let a = naive_sequential(&kb, &schedule, &suite, 11, None).unwrap();
        let b = swadt_run_stream(&kb, &schedule, &suite, &cfg, 11, None).unwrap();
        for (ra, rb) in a.forward.rows.iter().zip(b.forward.rows.iter()) {
            assert_eq!(ra.values, rb.values, "forward row {}", ra.id);
        }
        for (ra, rb) in a.backward.rows.iter().zip(b.backward.rows.iter()) {
            assert_eq!(ra.values, rb.values, "backward row {}", ra.id);
        }
        for (la, lb) in a.training.iter().zip(b.training.iter()) {
            assert_eq!(la.epoch_losses, lb.epoch_losses);
        }
    }

    #[test]
    fn naive_single_dataset_reduces_to_plain_adapter_training() {
        let kb = mini_model(5);
        let suite = mini_suite(6);
        let mut schedule = mini_schedule(&suite, 2);
        schedule.datasets.truncate(1);
        let master = 21u64;
        let report = naive_sequential(&kb, &schedule, &suite, master, None).unwrap();

        // replay the same machinery directly
        let ds_id = &schedule.datasets[0];
        let task = suite.stream_task(ds_id).unwrap();
        let adapter =
            init_adapter(&kb, &schedule.lora, "sequential", sub_seed(master, "seq/adapter"))
                .unwrap();
        let opts = FitOptions {
            epochs: schedule.epochs_per_dataset,
            batch_size: schedule.batch_size,
            sgd: schedule.sgd.clone(),
            patience: schedule.early_stop_patience,
            distill: None,
            ema: None,
        };
        let log = fit_adapter(
            &kb,
            &adapter,
            &task.train,
            &task.heldout,
            &opts,
            sub_seed(master, &format!("seq/{ds_id}")),
        )
        .unwrap();
        assert_eq!(report.training[0].epoch_losses, log.epoch_losses);
        let row = crate::eval::evaluate_snapshot(
            &kb,
            Some(&adapter),
            &suite.backward_test_refs(),
        )
        .unwrap();
        let got: Vec<f64> = report.backward.rows[1].values.iter().flatten().copied().collect();
        assert_eq!(got, row);
    }

    #[test]
    fn ceiling_of_one_dataset_reduces_to_plain_training() {
        let kb = mini_model(7);
        let suite = mini_suite(8);
        let mut schedule = mini_schedule(&suite, 2);
        schedule.datasets.truncate(1);
        let master = 31u64;
        let report = multitask_ceiling(&kb, &schedule, &suite, master, None).unwrap();

        let ds_id = &schedule.datasets[0];
        let task = suite.stream_task(ds_id).unwrap();
        let pooled = Dataset {
            id: "pooled".into(),
            split: Split::Train,
            samples: task.train.samples.clone(),
        };
        let pooled_ho = Dataset {
            id: "pooled-heldout".into(),
            split: Split::Heldout,
            samples: task.heldout.samples.clone(),
        };
        let adapter = init_adapter(
            &kb,
            &schedule.lora,
            "pooled",
            sub_seed(master, "ceiling/adapter"),
        )
        .unwrap();
        let opts = FitOptions {
            epochs: schedule.epochs_per_dataset,
            batch_size: schedule.batch_size,
            sgd: schedule.sgd.clone(),
            patience: schedule.early_stop_patience,
            distill: None,
            ema: None,
        };
        let log = fit_adapter(
            &kb,
            &adapter,
            &pooled,
            &pooled_ho,
            &opts,
            sub_seed(master, "ceiling/fit"),
        )
        .unwrap();
        assert_eq!(report.training[0].epoch_losses, log.epoch_losses);
    }

    #[test]
    fn swadt_rows_use_the_ema_shadow() {
        // with a huge beta and tiny training, the shadow barely moves, so
        // the first snapshot must stay close to the base row
        let kb = mini_model(9);
        let suite = mini_suite(10);
        let mut schedule = mini_schedule(&suite, 1);
        schedule.datasets.truncate(1);
        let cfg = SwadtConfig {
            ema_beta: 1.0, // shadow frozen at init => zero delta
            distill_weight: 0.0,
            distill_temperature: 2.0,
        };
        let report = swadt_run_stream(&kb, &schedule, &suite, &cfg, 13, None).unwrap();
        let base = &report.backward.rows[0];
        let after = &report.backward.rows[1];
        assert_eq!(base.values, after.values, "beta=1 shadow is the init (zero) delta");
    }

    #[test]
    fn invalid_swadt_config_rejected() {
        assert!(SwadtConfig {
            ema_beta: 1.5,
            ..SwadtConfig::default()
        }
        .validate()
        .is_err());
        assert!(SwadtConfig {
            distill_temperature: 0.0,
            ..SwadtConfig::default()
        }
        .validate()
        .is_err());
    }
}
