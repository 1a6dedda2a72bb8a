mod common;

use mitr_core::data::{generate_synthetic, FeatureArchive, SynthSpec};
use mitr_core::error::Error;
use mitr_core::evalkit::{missing_rate_sweep, regression_metrics, spearman, MetricReport};
use mitr_core::exec::{set_exec_mode, ExecMode};
use mitr_core::params::ParamStore;
use mitr_core::pipeline::{
    load_checkpoint, predict, save_checkpoint, train_student, train_teacher, ModelBundle, ModelConfig, Role, TrainConfig,
};

fn archive(seed: u64) -> FeatureArchive {
    generate_synthetic(&SynthSpec::new(60, 8, [5, 8, 6], 0.1, seed)).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        n_blocks: 2,
        ..Default::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        ..Default::default()
    }
}

fn flat(store: &ParamStore<f32>) -> Vec<u32> {
    store
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn mae(preds: &[f32], samples: &[mitr_core::data::MultimodalSample]) -> f64 {
    preds.iter().zip(samples).map(|(&p, s)| (p - s.label).abs() as f64).sum::<f64>() / preds.len() as f64
}

#[test]
fn teacher_loss_decreases() {
    let data = archive(11);
    let cfg = TrainConfig {
        patience: 50,
        ..quick(50)
    };
    for seed in 0..3 {
        let out = train_teacher(&data, &small(), &cfg, seed).unwrap();
        let first = out.history.first().unwrap().loss.total;
        let last = out.history.last().unwrap().loss.total;
        assert!(last < first, "seed {seed}: {first} -> {last}");
        assert!(out.bundle.is_frozen());
    }
}

#[test]
fn returned_parameters_are_the_best_epoch() {
    let data = archive(12);
    let cfg = TrainConfig {
        patience: 2,
        ..quick(12)
    };
    let out = train_teacher(&data, &small(), &cfg, 4).unwrap();
    let best = out.history.iter().find(|r| r.epoch == out.best_epoch).unwrap();
    let min = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_mae, min);
    let val = data.subset(&data.splits.val);
    let preds = predict(&out.bundle, &val, None).unwrap();
    assert!((mae(&preds, &val) - best.val_mae).abs() < 1e-9);
    let stopped_early = out.history.len() < cfg.max_epochs;
    if stopped_early {
        assert_eq!(out.history.len(), out.best_epoch + cfg.patience);
    }
}

#[test]
fn frozen_teacher_is_untouched_by_student_training() {
    let data = archive(13);
    let teacher = train_teacher(&data, &small(), &quick(2), 0).unwrap().bundle;
    let before = flat(&teacher.params);
    let _ = train_student(&data, &teacher, &small(), &quick(2), 0).unwrap();
    assert_eq!(flat(&teacher.params), before);
}

#[test]
fn execution_modes_and_reruns_are_bitwise_identical() {
    let data = archive(14);
    let run = |mode: ExecMode| {
        set_exec_mode(mode);
        let t = train_teacher(&data, &small(), &quick(2), 5).unwrap();
        let s = train_student(&data, &t.bundle, &small(), &quick(2), 5).unwrap();
        set_exec_mode(ExecMode::Parallel);
        (flat(&t.bundle.params), flat(&s.bundle.params), s.history)
    };
    let seq = run(ExecMode::Sequential);
    let par = run(ExecMode::Parallel);
    let again = run(ExecMode::Parallel);
    assert_eq!(seq.0, par.0);
    assert_eq!(seq.1, par.1);
    assert_eq!(seq.2, par.2);
    assert_eq!(par, again);
}

#[test]
fn different_seeds_give_different_models() {
    let data = archive(15);
    let a = train_teacher(&data, &small(), &quick(1), 0).unwrap();
    let b = train_teacher(&data, &small(), &quick(1), 1).unwrap();
    assert_ne!(flat(&a.bundle.params), flat(&b.bundle.params));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = archive(16);
    let teacher = train_teacher(&data, &small(), &quick(1), 2).unwrap().bundle;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&teacher, Some(&quick(1)), dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.train, Some(quick(1)));
    assert_eq!(flat(&loaded.bundle.params), flat(&teacher.params));
    let test = data.subset(&data.splits.test);
    let a = predict(&teacher, &test, None).unwrap();
    let b = predict(&loaded.bundle, &test, None).unwrap();
    assert_eq!(common::bits(&a), common::bits(&b));
}

#[test]
fn mismatched_teacher_is_a_config_error() {
    let data = archive(17);
    let teacher = train_teacher(&data, &small(), &quick(1), 0).unwrap().bundle;
    let other = ModelConfig { n_blocks: 3, ..small() };
    let err = train_student(&data, &teacher, &other, &quick(1), 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = archive(18);
    let bad = [
        TrainConfig { batch_size: 0, ..quick(1) },
        TrainConfig { patience: 0, ..quick(1) },
        TrainConfig { max_epochs: 0, ..quick(1) },
        TrainConfig { lr: -1.0, ..quick(1) },
        TrainConfig { seeds: vec![], ..quick(1) },
    ];
    for cfg in bad {
        let err = train_teacher(&data, &small(), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

#[test]
fn empty_validation_falls_back_to_train_loss() {
    let mut data = archive(19);
    let val = std::mem::take(&mut data.splits.val);
    data.splits.train.extend(val);
    let out = train_teacher(&data, &small(), &quick(3), 0).unwrap();
    for r in &out.history {
        assert_eq!(r.val_mae, r.loss.task);
    }
}

#[test]
fn sweep_at_rate_zero_equals_unmasked_evaluation() {
    let data = archive(20);
    let teacher = train_teacher(&data, &small(), &quick(2), 0).unwrap().bundle;
    let test = data.subset(&data.splits.test);
    let preds: Vec<f64> = predict(&teacher, &test, None).unwrap().into_iter().map(f64::from).collect();
    let truth: Vec<f64> = test.iter().map(|s| s.label as f64).collect();
    let clean = regression_metrics(&preds, &truth, data.style()).unwrap();
    let sweep = missing_rate_sweep(&teacher, &data, &[0.0, 0.3, 0.6], &[0, 1]).unwrap();
    assert_eq!(sweep.points[0].metrics, clean);
    let without_zero = missing_rate_sweep(&teacher, &data, &[0.3, 0.6], &[0, 1]).unwrap();
    assert_eq!(sweep.points[1..], without_zero.points[..]);
}

#[test]
fn multi_seed_sweep_is_the_mean_of_single_seed_sweeps() {
    let data = archive(21);
    let teacher = train_teacher(&data, &small(), &quick(2), 0).unwrap().bundle;
    let rates = [0.2, 0.5, 0.8];
    let joint = missing_rate_sweep(&teacher, &data, &rates, &[3, 4, 5]).unwrap();
    let singles: Vec<_> = [3, 4, 5]
        .iter()
        .map(|&s| missing_rate_sweep(&teacher, &data, &rates, &[s]).unwrap())
        .collect();
    for (k, p) in joint.points.iter().enumerate() {
        let per: Vec<MetricReport> = singles.iter().map(|r| r.points[k].metrics).collect();
        assert_eq!(p.per_seed, per);
        let mean = MetricReport::mean(&per);
        for (a, b) in p.metrics.values().iter().zip(mean.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn error_grows_with_the_missing_rate() {
    let data = generate_synthetic(&SynthSpec::new(120, 8, [5, 8, 6], 0.1, 22)).unwrap();
    let cfg = TrainConfig {
        patience: 30,
        ..quick(30)
    };
    let teacher = train_teacher(&data, &small(), &cfg, 0).unwrap().bundle;
    let rates: Vec<f64> = (0..=9).map(|i| i as f64 / 10.0).collect();
    let sweep = missing_rate_sweep(&teacher, &data, &rates, &[0, 1, 2]).unwrap();
    let maes: Vec<f64> = sweep.points.iter().map(|p| p.metrics.mae).collect();
    assert!(spearman(&rates, &maes).unwrap() > 0.0, "{maes:?}");
}

#[test]
fn arms_with_equal_seeds_share_initial_parameters() {
    let student = |cfg: ModelConfig| ModelBundle::new(Role::Student, cfg, [5, 8, 6], 8, 7).unwrap();
    let a = student(small());
    let b = student(small());
    assert_eq!(flat(&a.params), flat(&b.params));
    let deeper = student(ModelConfig { n_blocks: 3, ..small() });
    let mut shared = 0;
    for (name, p) in a.params.iter() {
        if let Some(q) = deeper.params.get(name) {
            assert_eq!(common::bits(p.value.data()), common::bits(q.value.data()), "{name}");
            shared += 1;
        }
    }
    assert_eq!(shared, a.params.len());
    assert!(deeper.params.len() > a.params.len());
}
