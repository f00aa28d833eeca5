mod common;

use garchmoments::bootstrap::{bootstrap_tests, BootstrapConfig};
use garchmoments::model::estimate_moments;
use garchmoments::montecarlo::{simulate_dataset, ExperimentConfig};
use garchmoments::parallel::map_indexed;
use garchmoments::qml::{closed_form_statistic, fit, wald_variance_garch11, OptimOptions};
use garchmoments::spectral::{closed_form_garch11, tau};
use garchmoments::{Execution, ModelSpec, MomentVector, ParamVector, SpectralMode};

#[test]
fn wald_interval_coverage() {
    let spec = ModelSpec::garch(1, 1);
    let truth = ParamVector::new(0.08, vec![0.05], vec![0.90]);
    let m = 2;
    let target = closed_form_garch11(0.05, 0.90, &MomentVector::gaussian(m), m);
    let n = 5000;
    let covered = map_indexed(Execution::default(), 200, |s| {
        let series = common::garch_series(&spec, &truth, n, 90_000 + s as u64);
        let f = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let t = closed_form_statistic(&f, m).unwrap();
        let half = 1.96 * (wald_variance_garch11(&f, &series, m).unwrap() / n as f64).sqrt();
        (t - target).abs() <= half
    });
    let rate = covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64;
    assert!((rate - 0.95).abs() <= 0.04, "coverage {rate}");
}

/// Two-sample Kolmogorov–Smirnov distance.
fn ks(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn bootstrap_mimics_the_boundary_distribution() {
    let mut cfg = ExperimentConfig::boundary_design();
    let n = 5000;
    cfg.n_grid = vec![n];
    let theta = cfg.true_theta().unwrap();
    let spec = cfg.spec.clone();
    let sqrt_n = (n as f64).sqrt();
    let mc: Vec<f64> = map_indexed(Execution::default(), 400, |sim| {
        let series = simulate_dataset(&cfg, &theta, n, sim).ok()?;
        let f = fit(&spec, &series, &cfg.optim).ok()?;
        let mu = estimate_moments(&f.residuals, &spec, 3).ok()?;
        Some(sqrt_n * (tau(&spec, &f.theta_hat, &mu, 3, SpectralMode::Radius).ok()? - 1.0))
    })
    .into_iter()
    .flatten()
    .collect();
    let series = simulate_dataset(&cfg, &theta, n, 10_000).unwrap();
    let bcfg = BootstrapConfig { b: 499, seed: 21, ..BootstrapConfig::default() };
    let r = bootstrap_tests(&spec, &series, &[3], &bcfg, &cfg.optim).unwrap().remove(0);
    let boot: Vec<f64> = r.bootstrap_stats.iter().map(|s| sqrt_n * s).collect();
    let d = ks(&mc, &boot);
    assert!(d < 0.1, "KS distance {d}");
}

#[test]
fn ks_distance_examples() {
    assert_eq!(ks(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
    assert_eq!(ks(&[0.0, 1.0], &[5.0, 6.0]), 1.0);
    assert_eq!(ks(&[0.0, 2.0], &[1.0, 3.0]), 0.5);
}
