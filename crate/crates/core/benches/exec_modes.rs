use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mitr_core::data::{generate_synthetic, FeatureArchive, SynthSpec};
use mitr_core::evalkit::missing_rate_sweep;
use mitr_core::exec::{set_exec_mode, ExecMode};
use mitr_core::pipeline::{train_student, train_teacher, ModelBundle, ModelConfig, TrainConfig};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn setup() -> (FeatureArchive, ModelConfig, TrainConfig, ModelBundle) {
    let archive = generate_synthetic(&SynthSpec::new(48, 8, [5, 8, 6], 0.1, 3)).expect("valid spec");
    let model = ModelConfig {
        d: 16,
        heads: 2,
        n_blocks: 2,
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    set_exec_mode(ExecMode::Parallel);
    let teacher = train_teacher(&archive, &model, &cfg, 0).expect("teacher trains").bundle;
    (archive, model, cfg, teacher)
}

fn student_epoch(c: &mut Criterion) {
    let (archive, model, cfg, teacher) = setup();
    let mut group = c.benchmark_group("student_epoch");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec_mode(mode);
            b.iter(|| train_student(&archive, &teacher, &model, &cfg, 0).expect("student trains"))
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let (archive, _, _, teacher) = setup();
    let rates: Vec<f64> = (1..=5).map(|i| i as f64 / 10.0).collect();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec_mode(mode);
            b.iter(|| missing_rate_sweep(&teacher, &archive, &rates, &[0, 1]).expect("sweep runs"))
        });
    }
    group.finish();
}

criterion_group!(benches, student_epoch, sweep);
criterion_main!(benches);
