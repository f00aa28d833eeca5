//! Fixed-design residual bootstrap: joint draws of (θ̂*, μ̂*) around the
//! unconstrained fit, and the moment-existence test whose bootstrap world is
//! built on the τ-constrained fit.
//!
//! In both schemes ε*_t = σ̃_t(θ̄) η*_t with θ̄ the fit on the original data,
//! and every refit filters σ̃_t(θ) from the original series. Only the
//! numerator of the quasi-likelihood changes between replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_moments, ModelSpec, ParamVector, ReturnSeries, VolatilityPath};
use crate::parallel::{map_indexed, Execution};
use crate::qml::{fit_constrained_unit, fit_unit, unit_variances, Direction, FitResult, Normalized, OptimOptions, UnitFit};
use crate::spectral::{test_statistic, SpectralMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    pub seed: u64,
    pub direction: Direction,
    /// Recentre and rescale the residual pool to mean 0, variance 1.
    pub resample_standardize: bool,
    pub mode: SpectralMode,
    pub execution: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 1999,
            seed: 0,
            direction: Direction::UpperTail,
            resample_standardize: false,
            mode: SpectralMode::Radius,
            execution: Execution::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidInput("B must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random stream of replicate `index`: a ChaCha8 keystream whose key is
/// expanded from `seed` and whose stream id is `index`. Each (seed, index)
/// pair addresses its own counter space, so draws do not depend on which
/// thread runs the replicate or in what order.
pub fn rng_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// n draws with replacement from `pool`.
pub fn resample(pool: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = pool.len();
    (0..n).map(|_| pool[rng.random_range(0..len)]).collect()
}

/// ε*_t = σ̃_t η*_t.
pub fn bootstrap_series(vol: &VolatilityPath, eta_star: &[f64]) -> Result<Vec<f64>> {
    if vol.sigma2.len() != eta_star.len() {
        return Err(Error::InvalidInput(format!(
            "{} volatilities for {} innovations",
            vol.sigma2.len(),
            eta_star.len()
        )));
    }
    Ok(vol.sigma2.iter().zip(eta_star).map(|(s, e)| s.sqrt() * e).collect())
}

fn residual_pool(residuals: &[f64], standardize: bool) -> Vec<f64> {
    if !standardize {
        return residuals.to_vec();
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        residuals.iter().map(|e| (e - mean) / sd).collect()
    } else {
        residuals.to_vec()
    }
}

/// One bootstrap world on unit-scale data: draw η*, build ε* on the fixed
/// design and refit from `start`. Non-converged refits count as failures.
fn replicate(
    spec: &ModelSpec,
    design: &Normalized,
    sigma2: &[f64],
    pool: &[f64],
    start: &[f64],
    opts: &OptimOptions,
    seed: u64,
    index: usize,
) -> Option<UnitFit> {
    let mut rng = rng_stream(seed, index as u64);
    let eta = resample(pool, sigma2.len(), &mut rng);
    let eps: Vec<f64> = sigma2.iter().zip(&eta).map(|(s, e)| s.sqrt() * e).collect();
    match fit_unit(spec, design, &eps, opts, Some(start)) {
        Ok(fit) if fit.converged => Some(fit),
        _ => None,
    }
}

fn warn_failures(failures: usize, b: usize, what: &str) {
    if failures * 100 > b {
        log::warn!("{failures} of {b} bootstrap replicates failed ({what}); they are dropped from the results");
    }
}

/// Draws of (θ̂*, μ̂*), one row per successful replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointBootstrapDraws {
    pub theta_draws: Vec<Vec<f64>>,
    pub mu_draws: Vec<Vec<f64>>,
    pub failures: usize,
}

impl JointBootstrapDraws {
    /// Standard deviation of each θ coordinate across replicates.
    pub fn theta_std(&self) -> Vec<f64> {
        column_std(&self.theta_draws)
    }

    pub fn mu_std(&self) -> Vec<f64> {
        column_std(&self.mu_draws)
    }
}

fn column_std(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else { return Vec::new() };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let ss = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>();
            if rows.len() > 1 {
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

/// Bootstrap of (θ̂, μ̂) on the design of the unconstrained fit.
pub fn bootstrap_joint(
    fit: &FitResult,
    series: &ReturnSeries,
    m: usize,
    cfg: &BootstrapConfig,
    opts: &OptimOptions,
) -> Result<JointBootstrapDraws> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    if fit.residuals.len() != series.len() {
        return Err(Error::InvalidInput("fit and series lengths differ".into()));
    }
    let spec = &fit.spec;
    let design = Normalized::new(series.values())?;
    let start = design.to_unit(&fit.theta_hat);
    let sigma2 = unit_variances(spec, &design, &start);
    let pool = residual_pool(&fit.residuals, cfg.resample_standardize);
    let draws = map_indexed(cfg.execution, cfg.b, |b| {
        let rep = replicate(spec, &design, &sigma2, &pool, &start, opts, cfg.seed, b)?;
        let mu = estimate_moments(&rep.residuals, spec, m).ok()?;
        Some((design.to_original(spec, &rep.theta).to_vec(), mu.mu))
    });
    let failures = draws.iter().filter(|d| d.is_none()).count();
    if failures == cfg.b {
        return Err(Error::AllReplicatesFailed(cfg.b));
    }
    warn_failures(failures, cfg.b, "joint bootstrap");
    let (theta_draws, mu_draws) = draws.into_iter().flatten().unzip();
    Ok(JointBootstrapDraws { theta_draws, mu_draws, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTestResult {
    pub m: usize,
    pub t_hat: f64,
    pub t_hat_c: f64,
    /// T̂*⁽ᵇ⁾ − T̂ᶜ for every successful replicate, in replicate order.
    pub bootstrap_stats: Vec<f64>,
    pub p_value: f64,
    pub b_effective: usize,
    pub failures: usize,
    pub mode: SpectralMode,
    pub direction: Direction,
}

impl MomentTestResult {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// Share of centred bootstrap statistics at or beyond T̂ − 1: for the upper
/// tail the count of T̂ − 1 ≤ s_b, for the lower tail T̂ − 1 ≥ s_b.
pub fn p_value(t_hat: f64, centered_stats: &[f64], direction: Direction) -> f64 {
    if centered_stats.is_empty() {
        return f64::NAN;
    }
    let x = t_hat - 1.0;
    let hits = centered_stats
        .iter()
        .filter(|s| match direction {
            Direction::UpperTail => x <= **s,
            Direction::LowerTail => x >= **s,
        })
        .count();
    hits as f64 / centered_stats.len() as f64
}

/// Moment tests for every m in `ms` on one series.
pub fn bootstrap_tests(
    spec: &ModelSpec,
    series: &ReturnSeries,
    ms: &[usize],
    cfg: &BootstrapConfig,
    opts: &OptimOptions,
) -> Result<Vec<MomentTestResult>> {
    let design = Normalized::new(series.values())?;
    let unc = fit_unit(spec, &design, &design.z, opts, None)?;
    if !unc.converged {
        log::warn!("unconstrained fit did not converge (projected gradient {:.3e})", unc.gradient_norm);
    }
    tests_on_unit(spec, &design, &unc, ms, cfg, opts)
}

/// Moment test for a single m.
pub fn bootstrap_test(
    spec: &ModelSpec,
    series: &ReturnSeries,
    m: usize,
    cfg: &BootstrapConfig,
    opts: &OptimOptions,
) -> Result<MomentTestResult> {
    bootstrap_tests(spec, series, &[m], cfg, opts).map(|mut v| v.remove(0))
}

/// Moment tests reusing an unconstrained fit of `series`.
pub fn bootstrap_test_from_fit(
    series: &ReturnSeries,
    fit: &FitResult,
    ms: &[usize],
    cfg: &BootstrapConfig,
    opts: &OptimOptions,
) -> Result<Vec<MomentTestResult>> {
    if fit.residuals.len() != series.len() {
        return Err(Error::InvalidInput("fit and series lengths differ".into()));
    }
    let spec = &fit.spec;
    let design = Normalized::new(series.values())?;
    let theta = design.to_unit(&fit.theta_hat);
    let sigma2 = unit_variances(spec, &design, &theta);
    let unc = UnitFit {
        residuals: design.z.iter().zip(&sigma2).map(|(e, s)| e / s.sqrt()).collect(),
        sigma2,
        f: -fit.loglik - 0.5 * design.s2.ln(),
        theta,
        converged: fit.converged,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        tau: None,
    };
    tests_on_unit(spec, &design, &unc, ms, cfg, opts)
}

pub(crate) fn tests_on_unit(
    spec: &ModelSpec,
    design: &Normalized,
    unc: &UnitFit,
    ms: &[usize],
    cfg: &BootstrapConfig,
    opts: &OptimOptions,
) -> Result<Vec<MomentTestResult>> {
    cfg.validate()?;
    if ms.is_empty() || ms.contains(&0) {
        return Err(Error::InvalidInput("m values must be positive".into()));
    }
    let theta_hat = ParamVector::from_slice(spec, &unc.theta)?;
    let mut per_m = Vec::with_capacity(ms.len());
    for &m in ms {
        let mu = estimate_moments(&unc.residuals, spec, m)?;
        let t_hat = test_statistic(spec, &theta_hat, &unc.residuals, m, cfg.mode)?;
        let c = fit_constrained_unit(spec, design, unc, &mu, m, cfg.mode, cfg.direction, opts)?;
        let t_hat_c = c.tau.expect("constrained fits record τ");
        per_m.push((m, t_hat, t_hat_c, c.theta));
    }

    // m values whose constrained estimates coincide share one bootstrap world
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for (idx, (_, _, _, theta_c)) in per_m.iter().enumerate() {
        let key: Vec<u64> = theta_c.iter().map(|v| v.to_bits()).collect();
        match groups
            .iter_mut()
            .find(|(t, _)| t.iter().map(|v| v.to_bits()).eq(key.iter().copied()))
        {
            Some((_, members)) => members.push(idx),
            None => groups.push((theta_c.clone(), vec![idx])),
        }
    }

    let pool = residual_pool(&unc.residuals, cfg.resample_standardize);
    let mut out: Vec<Option<MomentTestResult>> = vec![None; ms.len()];
    for (theta_c, members) in groups {
        let sigma2 = unit_variances(spec, design, &theta_c);
        let group_ms: Vec<usize> = members.iter().map(|&i| per_m[i].0).collect();
        let stats = map_indexed(cfg.execution, cfg.b, |b| {
            let rep = replicate(spec, design, &sigma2, &pool, &theta_c, opts, cfg.seed, b)?;
            let theta = ParamVector::from_slice(spec, &rep.theta).ok()?;
            group_ms
                .iter()
                .map(|&m| test_statistic(spec, &theta, &rep.residuals, m, cfg.mode).ok())
                .collect::<Option<Vec<f64>>>()
        });
        let failures = stats.iter().filter(|s| s.is_none()).count();
        if failures == cfg.b {
            return Err(Error::AllReplicatesFailed(cfg.b));
        }
        warn_failures(failures, cfg.b, "moment test");
        for (slot, &idx) in members.iter().enumerate() {
            let (m, t_hat, t_hat_c, _) = per_m[idx];
            let centered: Vec<f64> = stats.iter().flatten().map(|s| s[slot] - t_hat_c).collect();
            out[idx] = Some(MomentTestResult {
                m,
                t_hat,
                t_hat_c,
                p_value: p_value(t_hat, &centered, cfg.direction),
                b_effective: centered.len(),
                bootstrap_stats: centered,
                failures,
                mode: cfg.mode,
                direction: cfg.direction,
            });
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every m belongs to a group")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use crate::qml::fit;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize, seed: u64) -> ReturnSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta: Vec<f64> = (0..n + 300).map(|_| StandardNormal.sample(&mut rng)).collect();
        let spec = ModelSpec::garch(1, 1);
        simulate(&spec, &ParamVector::new(0.08, vec![0.08], vec![0.88]), &eta, 300).unwrap()
    }

    #[test]
    fn p_value_examples() {
        let stats = [-1.0, -0.5, 0.0, 0.5, 1.0];
        assert_eq!(p_value(-4.0, &stats, Direction::UpperTail), 1.0);
        assert_eq!(p_value(-4.0, &stats, Direction::LowerTail), 0.0);
        assert_eq!(p_value(1.5, &[-1.0, 0.0, 1.0, 2.0], Direction::UpperTail), 0.5);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let pool: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = resample(&pool, 100, &mut rng_stream(7, 3));
        let b = resample(&pool, 100, &mut rng_stream(7, 3));
        let c = resample(&pool, 100, &mut rng_stream(7, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_design_series() {
        let vol = VolatilityPath { sigma2: vec![4.0, 9.0, 0.25], presample_value: 1.0 };
        assert_eq!(bootstrap_series(&vol, &[1.0, -2.0, 4.0]).unwrap(), vec![2.0, -6.0, 2.0]);
        assert!(bootstrap_series(&vol, &[1.0]).is_err());
    }

    #[test]
    fn point_mass_residuals_reproduce_the_fit() {
        let spec = ModelSpec::garch(1, 1);
        let series = data(600, 1);
        let mut f = fit(&spec, &series, &OptimOptions::default()).unwrap();
        f.residuals = vec![1.0; series.len()];
        let cfg = BootstrapConfig { b: 5, ..BootstrapConfig::default() };
        let draws = bootstrap_joint(&f, &series, 2, &cfg, &OptimOptions::default()).unwrap();
        assert_eq!(draws.failures, 0);
        for (theta, mu) in draws.theta_draws.iter().zip(&draws.mu_draws) {
            for (a, b) in theta.iter().zip(f.theta_hat.to_vec()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "{theta:?} vs {:?}", f.theta_hat);
            }
            assert!(mu.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn test_is_deterministic_and_scale_free() {
        let spec = ModelSpec::garch(1, 1);
        let series = data(500, 2);
        let cfg = BootstrapConfig { b: 19, seed: 99, ..BootstrapConfig::default() };
        let opts = OptimOptions::default();
        let a = bootstrap_tests(&spec, &series, &[1, 2], &cfg, &opts).unwrap();
        let b = bootstrap_tests(&spec, &series, &[1, 2], &cfg, &opts).unwrap();
        assert_eq!(a, b);
        let scaled = bootstrap_tests(&spec, &series.scaled(2.0).unwrap(), &[1, 2], &cfg, &opts).unwrap();
        assert_eq!(a, scaled);
        let seq = BootstrapConfig { execution: Execution::Sequential, ..cfg.clone() };
        assert_eq!(a, bootstrap_tests(&spec, &series, &[1, 2], &seq, &opts).unwrap());
        for r in &a {
            assert!(r.t_hat_c <= 1.0 + crate::qml::CONSTRAINT_TOL);
            assert_eq!(r.b_effective + r.failures, 19);
            let k = (r.p_value * r.b_effective as f64).round();
            assert_eq!(k / r.b_effective as f64, r.p_value);
        }
    }
}
