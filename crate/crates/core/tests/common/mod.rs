#![allow(dead_code)]

use garchmoments::model::simulate;
use garchmoments::{ModelSpec, ParamVector, ReturnSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random admissible parameters with Σα + Σβ < 0.95.
pub fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let omega = rng.random_range(0.02..0.5);
    let budget = rng.random_range(0.3..0.95);
    let k = spec.n_alpha() + spec.p;
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    let coef: Vec<f64> = w.iter().map(|v| budget * v / total).collect();
    ParamVector::new(omega, coef[..spec.n_alpha()].to_vec(), coef[spec.n_alpha()..].to_vec())
}

pub fn garch_series(spec: &ModelSpec, theta: &ParamVector, n: usize, seed: u64) -> ReturnSeries {
    let mut r = rng(seed);
    let eta = gaussian(n + 500, &mut r);
    simulate(spec, theta, &eta, 500).expect("simulation")
}

pub fn specs() -> Vec<ModelSpec> {
    vec![ModelSpec::arch(2), ModelSpec::garch(1, 1), ModelSpec::garch(1, 2), ModelSpec::garch(2, 2)]
}
