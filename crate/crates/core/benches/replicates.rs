use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use garchmoments::bootstrap::{bootstrap_joint, bootstrap_test_from_fit, BootstrapConfig};
use garchmoments::model::simulate;
use garchmoments::montecarlo::{run_experiment, ExperimentConfig};
use garchmoments::qml::{fit, OptimOptions};
use garchmoments::{Execution, ModelSpec, ParamVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data(spec: &ModelSpec, theta: &ParamVector, n: usize) -> garchmoments::ReturnSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eta: Vec<f64> = (0..n + 500).map(|_| StandardNormal.sample(&mut rng)).collect();
    simulate(spec, theta, &eta, 500).unwrap()
}

fn bootstrap(c: &mut Criterion) {
    let spec = ModelSpec::garch(1, 2);
    let theta = ParamVector::new(0.08, vec![0.05, 0.10], vec![0.80]);
    let series = data(&spec, &theta, 1000);
    let opts = OptimOptions::default();
    let f = fit(&spec, &series, &opts).unwrap();

    let mut group = c.benchmark_group("moment_test_b99");
    group.sample_size(10);
    for (name, execution) in MODES {
        let cfg = BootstrapConfig { b: 99, seed: 3, execution, ..BootstrapConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| bootstrap_test_from_fit(&series, &f, &[1, 3, 5], cfg, &opts).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("joint_bootstrap_b99");
    group.sample_size(10);
    for (name, execution) in MODES {
        let cfg = BootstrapConfig { b: 99, seed: 3, execution, ..BootstrapConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| bootstrap_joint(&f, &series, 2, cfg, &opts).unwrap())
        });
    }
    group.finish();
}

fn experiment(c: &mut Criterion) {
    let mut group = c.benchmark_group("experiment_s4_b19");
    group.sample_size(10);
    for (name, execution) in MODES {
        let mut cfg = ExperimentConfig::boundary_design();
        cfg.s = 4;
        cfg.b = 19;
        cfg.n_grid = vec![500];
        cfg.m_grid = vec![1, 4];
        cfg.execution = execution;
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| b.iter(|| run_experiment(cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bootstrap, experiment);
criterion_main!(benches);
