//! Gaussian quasi-maximum-likelihood estimation for ARCH/GARCH models, the
//! τ-constrained estimator and plug-in covariance blocks of the joint limit of
//! √n(θ̂ − θ₀, μ̂ − μ).
//!
//! Optimisation runs on the series divided by its root mean square, so the
//! optimizer always sees data of unit scale. Estimates are mapped back with
//! ω ↦ ω·s²; α and β are scale free.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{filter_volatility, Family, ModelSpec, MomentVector, ParamVector, ReturnSeries, VolatilityPath, SIGMA2_FLOOR};
use crate::optim::{nelder_mead, projected_bfgs, Bounds, MinimizeOptions, MinimizeResult};
use crate::spectral::{closed_form_garch11, closed_form_garch11_gradient, expected_kron, expected_kron_symmetric, perron_from, tau, SpectralMode};

/// ε_c: admissible slack of the constraint τ ≤ 1 at a constrained solution.
pub const CONSTRAINT_TOL: f64 = 1e-8;

const OMEGA_MIN: f64 = 1e-8;
const OMEGA_MAX: f64 = 1e6;
const COEF_MAX: f64 = 0.999_999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Bound on the sup-norm of the projected gradient of the average
    /// negative log quasi-likelihood (unit-scale data).
    pub tolerance_obj: f64,
    pub tolerance_param: f64,
    pub restarts: usize,
    pub penalty_schedule: Vec<f64>,
    /// Parameters held at a value: (index into (ω, α…, β…), value).
    #[serde(default)]
    pub fixed: Vec<(usize, f64)>,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance_obj: 1e-9,
            tolerance_param: 1e-12,
            restarts: 3,
            penalty_schedule: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6],
            fixed: Vec::new(),
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_obj > 0.0 && self.tolerance_param > 0.0) {
            return Err(Error::InvalidInput("optimizer tolerances must be positive".into()));
        }
        if self.penalty_schedule.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidInput("penalty weights must be positive".into()));
        }
        Ok(())
    }

    fn minimize(&self) -> MinimizeOptions {
        MinimizeOptions {
            max_iterations: self.max_iterations,
            grad_tol: self.tolerance_obj,
            step_tol: self.tolerance_param,
            ..MinimizeOptions::default()
        }
    }
}

/// Null hypothesis of the moment test: `UpperTail` is T ≤ 1 (moment exists),
/// `LowerTail` is T ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    #[serde(rename = "upper")]
    UpperTail,
    #[serde(rename = "lower")]
    LowerTail,
}

impl Direction {
    /// Amount by which τ violates the null restriction.
    pub fn violation(self, tau: f64) -> f64 {
        match self {
            Direction::UpperTail => (tau - 1.0).max(0.0),
            Direction::LowerTail => (1.0 - tau).max(0.0),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "upper" | "uppertail" => Ok(Direction::UpperTail),
            "lower" | "lowertail" => Ok(Direction::LowerTail),
            other => Err(Error::InvalidInput(format!("unknown direction '{other}'"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::UpperTail => "upper",
            Direction::LowerTail => "lower",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: ParamVector,
    /// Average log quasi-likelihood (1/n) Σ ℓ̃_t(θ̂).
    pub loglik: f64,
    pub vol: VolatilityPath,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the projected gradient at θ̂ (unit-scale data).
    pub gradient_norm: f64,
    pub constrained: bool,
    pub tau_at_solution: Option<f64>,
}

/// The series divided by its root mean square s.
#[derive(Debug, Clone)]
pub(crate) struct Normalized {
    pub z: Vec<f64>,
    pub z2: Vec<f64>,
    /// (1/n) Σ z_t², equal to one up to rounding.
    pub m2: f64,
    pub s2: f64,
}

impl Normalized {
    pub fn new(values: &[f64]) -> Result<Self> {
        let n = values.len() as f64;
        let s2 = values.iter().map(|v| v * v).sum::<f64>() / n;
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(Error::Degenerate("the series is identically zero; ω, α and β are not identified".into()));
        }
        let s = s2.sqrt();
        let z: Vec<f64> = values.iter().map(|v| v / s).collect();
        let z2: Vec<f64> = z.iter().map(|v| v * v).collect();
        let m2 = z2.iter().sum::<f64>() / n;
        Ok(Self { z, z2, m2, s2 })
    }

    /// Every |ε_t| equal: the data carry no information on α and β.
    fn is_flat(&self) -> bool {
        self.z2.iter().all(|v| (v - self.m2).abs() <= 1e-12 * self.m2)
    }

    pub fn to_unit(&self, theta: &ParamVector) -> Vec<f64> {
        let mut v = theta.to_vec();
        v[0] /= self.s2;
        v
    }

    pub fn to_original(&self, spec: &ModelSpec, x: &[f64]) -> ParamVector {
        let mut v = x.to_vec();
        v[0] *= self.s2;
        ParamVector::from_slice(spec, &v).expect("layout checked")
    }
}

fn check_family(spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    match spec.family {
        Family::Arch | Family::Garch => Ok(()),
        other => Err(Error::Unsupported(format!("QML estimation ({other})"))),
    }
}

/// GARCH variance recursion on squared observations `z2` with presample
/// ε̃² = `m2` and σ̃₀² at the steady state. Calls `visit(t, σ̃_t², ∂σ̃_t²/∂θ)`;
/// the derivative slice is empty unless `deriv` is set.
fn garch_pass<F: FnMut(usize, f64, &[f64])>(q: usize, theta: &[f64], z2: &[f64], m2: f64, deriv: bool, mut visit: F) {
    let r = theta.len();
    let p = r - 1 - q;
    let omega = theta[0];
    let alpha = &theta[1..1 + q];
    let beta = &theta[1 + q..];
    let persistence: f64 = beta.iter().sum();
    let drive: f64 = alpha.iter().map(|a| a * m2).sum();
    let stationary = p > 0 && persistence < 1.0;
    let level = if p == 0 {
        omega + drive
    } else if stationary {
        (omega + drive) / (1.0 - persistence)
    } else {
        m2
    };
    let mut pre_d = vec![0.0; if deriv { r } else { 0 }];
    if deriv && stationary {
        let k = 1.0 / (1.0 - persistence);
        pre_d[0] = k;
        for i in 0..q {
            pre_d[1 + i] = m2 * k;
        }
        for j in 0..p {
            pre_d[1 + q + j] = level * k;
        }
    }

    let n = z2.len();
    let mut sigma2 = Vec::with_capacity(n);
    // ring of the last p derivative vectors, slot t % p
    let slots = p.max(1);
    let mut ring = vec![0.0; if deriv { slots * r } else { 0 }];
    let mut d = vec![0.0; if deriv { r } else { 0 }];
    for t in 0..n {
        let mut v = omega;
        for i in 1..=q {
            v += alpha[i - 1] * if t >= i { z2[t - i] } else { m2 };
        }
        for j in 1..=p {
            v += beta[j - 1] * if t >= j { sigma2[t - j] } else { level };
        }
        let floored = v < SIGMA2_FLOOR;
        let v = v.max(SIGMA2_FLOOR);
        if deriv {
            d[0] = 1.0;
            for i in 1..=q {
                d[i] = if t >= i { z2[t - i] } else { m2 };
            }
            for j in 1..=p {
                d[q + j] = if t >= j { sigma2[t - j] } else { level };
            }
            for j in 1..=p {
                let b = beta[j - 1];
                if b == 0.0 {
                    continue;
                }
                let prev: &[f64] = if t >= j {
                    let s = (t - j) % slots;
                    &ring[s * r..(s + 1) * r]
                } else {
                    &pre_d
                };
                for k in 0..r {
                    d[k] += b * prev[k];
                }
            }
            if floored {
                d.iter_mut().for_each(|x| *x = 0.0);
            }
            if p > 0 {
                let s = t % slots;
                ring[s * r..(s + 1) * r].copy_from_slice(&d);
            }
        }
        sigma2.push(v);
        visit(t, v, &d);
    }
}

pub(crate) fn unit_variances(spec: &ModelSpec, design: &Normalized, x: &[f64]) -> Vec<f64> {
    variances(spec.q, x, &design.z2, design.m2)
}

fn variances(q: usize, theta: &[f64], z2: &[f64], m2: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(z2.len());
    garch_pass(q, theta, z2, m2, false, |_, s, _| out.push(s));
    out
}

/// Average negative log quasi-likelihood of the responses `y2` against the
/// volatilities filtered from `z2`, and its gradient.
fn objective(q: usize, theta: &[f64], z2: &[f64], m2: f64, y2: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = z2.len() as f64;
    let mut total = 0.0;
    match grad {
        Some(g) => {
            g.iter_mut().for_each(|x| *x = 0.0);
            garch_pass(q, theta, z2, m2, true, |t, s, d| {
                let ratio = y2[t] / s;
                total += 0.5 * (ratio + s.ln());
                let w = 0.5 * (1.0 - ratio) / s;
                for (gk, dk) in g.iter_mut().zip(d) {
                    *gk += w * dk;
                }
            });
            g.iter_mut().for_each(|x| *x /= n);
        }
        None => garch_pass(q, theta, z2, m2, false, |t, s, _| total += 0.5 * (y2[t] / s + s.ln())),
    }
    let f = total / n;
    if f.is_finite() {
        f
    } else {
        f64::INFINITY
    }
}

/// −(1/n) Σ ℓ̃_t(θ) with ℓ̃_t = −½(ε_t/σ̃_t)² − log σ̃_t.
pub fn negative_qll(spec: &ModelSpec, theta: &ParamVector, series: &ReturnSeries) -> Result<f64> {
    let vol = filter_volatility(spec, theta, series)?;
    let n = series.len() as f64;
    let total: f64 = series
        .values()
        .iter()
        .zip(&vol.sigma2)
        .map(|(e, s)| 0.5 * (e * e / s + s.ln()))
        .sum();
    Ok(total / n)
}

/// Gradient of [`negative_qll`] with respect to (ω, α…, β…).
pub fn qll_score(spec: &ModelSpec, theta: &ParamVector, series: &ReturnSeries) -> Result<Vec<f64>> {
    check_family(spec)?;
    theta.validate(spec)?;
    let z2: Vec<f64> = series.values().iter().map(|v| v * v).collect();
    let m2 = z2.iter().sum::<f64>() / z2.len() as f64;
    let mut g = vec![0.0; spec.n_params()];
    let f = objective(spec.q, &theta.to_vec(), &z2, m2, &z2, Some(&mut g));
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluating the quasi-likelihood score".into()));
    }
    Ok(g)
}

/// A fit on unit-scale data.
#[derive(Debug, Clone)]
pub(crate) struct UnitFit {
    pub theta: Vec<f64>,
    pub f: f64,
    pub sigma2: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub tau: Option<f64>,
}

impl UnitFit {
    fn new(spec: &ModelSpec, design: &Normalized, y: &[f64], res: MinimizeResult, iterations: usize) -> Self {
        let sigma2 = variances(spec.q, &res.x, &design.z2, design.m2);
        let residuals = y.iter().zip(&sigma2).map(|(e, s)| e / s.sqrt()).collect();
        Self {
            theta: res.x,
            f: res.f,
            sigma2,
            residuals,
            converged: res.converged,
            iterations,
            gradient_norm: res.projected_grad,
            tau: None,
        }
    }

    pub fn into_result(self, spec: &ModelSpec, design: &Normalized) -> FitResult {
        let theta_hat = design.to_original(spec, &self.theta);
        let presample = {
            let x = &self.theta;
            let q = spec.q;
            let persistence: f64 = x[1 + q..].iter().sum();
            let drive: f64 = x[1..1 + q].iter().map(|a| a * design.m2).sum();
            let level = if spec.p == 0 {
                x[0] + drive
            } else if persistence < 1.0 {
                (x[0] + drive) / (1.0 - persistence)
            } else {
                design.m2
            };
            level * design.s2
        };
        FitResult {
            spec: *spec,
            theta_hat,
            loglik: -(self.f + 0.5 * design.s2.ln()),
            vol: VolatilityPath {
                sigma2: self.sigma2.iter().map(|s| s * design.s2).collect(),
                presample_value: presample,
            },
            residuals: self.residuals,
            converged: self.converged,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            constrained: self.tau.is_some(),
            tau_at_solution: self.tau,
        }
    }
}

fn bounds(spec: &ModelSpec, fixed: &[(usize, f64)]) -> Bounds {
    let r = spec.n_params();
    let mut lower = vec![0.0; r];
    let mut upper = vec![COEF_MAX; r];
    lower[0] = OMEGA_MIN;
    upper[0] = OMEGA_MAX;
    for &(i, v) in fixed {
        lower[i] = v;
        upper[i] = v;
    }
    let b = Bounds::new(lower, upper);
    if spec.p > 0 {
        b.with_sum_cap(1 + spec.q..r, COEF_MAX)
    } else {
        b
    }
}

fn default_start(spec: &ModelSpec) -> Vec<f64> {
    let mut x = vec![0.1];
    x.extend(std::iter::repeat_n(0.05 / spec.q as f64, spec.q));
    x.extend(std::iter::repeat_n(0.80 / spec.p.max(1) as f64, spec.p));
    x
}

/// Fixed parameters in unit-scale coordinates.
fn unit_fixed(spec: &ModelSpec, design: &Normalized, fixed: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
    fixed
        .iter()
        .map(|&(i, v)| {
            if i >= spec.n_params() {
                return Err(Error::InvalidInput(format!("fixed index {i} outside θ of length {}", spec.n_params())));
            }
            let v = if i == 0 { v / design.s2 } else { v };
            let ok = if i == 0 { v > 0.0 && v.is_finite() } else { (0.0..=COEF_MAX).contains(&v) };
            if !ok {
                return Err(Error::ParameterDomain(format!("fixed value {v} for index {i} is outside the parameter box")));
            }
            Ok((i, v))
        })
        .collect()
}

/// Minimises the unit-scale objective with BFGS, a Nelder-Mead fallback and
/// jittered restarts.
pub(crate) fn fit_unit(
    spec: &ModelSpec,
    design: &Normalized,
    y: &[f64],
    opts: &OptimOptions,
    start: Option<&[f64]>,
) -> Result<UnitFit> {
    check_family(spec)?;
    opts.validate()?;
    let r = spec.n_params();
    if design.z.len() <= r {
        return Err(Error::InvalidInput(format!("need more than {r} observations, got {}", design.z.len())));
    }
    let fixed = unit_fixed(spec, design, &opts.fixed)?;
    let free_dynamics = (1..r).any(|i| !fixed.iter().any(|(j, _)| *j == i));
    if free_dynamics && design.is_flat() {
        return Err(Error::Degenerate(
            "all |ε_t| are equal, so α and β are not identified (fix them to estimate ω)".into(),
        ));
    }
    let bounds = bounds(spec, &fixed);
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let q = spec.q;
    let f = |x: &[f64], g: Option<&mut [f64]>| objective(q, x, &design.z2, design.m2, &y2, g);
    let mopts = opts.minimize();

    let mut x0 = start.map(|s| s.to_vec()).unwrap_or_else(|| default_start(spec));
    for &(i, v) in &fixed {
        x0[i] = v;
    }
    let mut best = projected_bfgs(f, &x0, &bounds, &mopts);
    let mut iterations = best.iterations;
    if !best.converged {
        let nm = nelder_mead(|x| f(x, None), &best.x, &bounds, &mopts);
        iterations += nm.iterations;
        let polished = projected_bfgs(f, &nm.x, &bounds, &mopts);
        iterations += polished.iterations;
        if polished.converged || polished.f < best.f {
            best = polished;
        }
    }
    let mut restart = 0;
    while !best.converged && restart < opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667_f3bc_c909 ^ restart as u64);
        let mut x = default_start(spec);
        x[0] *= rng.random_range(-1.0f64..1.0).exp();
        for i in 0..q {
            x[1 + i] = rng.random_range(0.0..0.2) / q as f64;
        }
        for j in 0..spec.p {
            x[1 + q + j] = rng.random_range(0.5..0.95) / spec.p as f64;
        }
        for &(i, v) in &fixed {
            x[i] = v;
        }
        let trial = projected_bfgs(f, &x, &bounds, &mopts);
        iterations += trial.iterations;
        if (trial.converged && !best.converged) || trial.f < best.f {
            best = trial;
        }
        restart += 1;
    }
    if !best.f.is_finite() {
        return Err(Error::NonFinite("maximising the quasi-likelihood".into()));
    }
    Ok(UnitFit::new(spec, design, y, best, iterations))
}

/// Unconstrained QML estimate over the parameter box.
pub fn fit(spec: &ModelSpec, series: &ReturnSeries, opts: &OptimOptions) -> Result<FitResult> {
    let design = Normalized::new(series.values())?;
    let unit = fit_unit(spec, &design, &design.z, opts, None)?;
    Ok(unit.into_result(spec, &design))
}

/// As [`fit`], started from `start`.
pub fn fit_from(spec: &ModelSpec, series: &ReturnSeries, opts: &OptimOptions, start: &ParamVector) -> Result<FitResult> {
    start.validate(spec)?;
    let design = Normalized::new(series.values())?;
    let x0 = design.to_unit(start);
    let unit = fit_unit(spec, &design, &design.z, opts, Some(&x0))?;
    Ok(unit.into_result(spec, &design))
}

/// Maximises Σ ℓ*_t(θ) with ℓ*_t = −½(ε*_t/σ̃_t(θ))² − log σ̃_t(θ), where
/// σ̃_t(θ) is filtered from `design` and `response` holds ε*.
pub fn fit_fixed_design(
    spec: &ModelSpec,
    design: &ReturnSeries,
    response: &[f64],
    opts: &OptimOptions,
    start: Option<&ParamVector>,
) -> Result<FitResult> {
    if response.len() != design.len() {
        return Err(Error::InvalidInput(format!(
            "response has {} values, design {}",
            response.len(),
            design.len()
        )));
    }
    let d = Normalized::new(design.values())?;
    let s = d.s2.sqrt();
    let y: Vec<f64> = response.iter().map(|v| v / s).collect();
    let x0 = match start {
        Some(t) => {
            t.validate(spec)?;
            Some(d.to_unit(t))
        }
        None => None,
    };
    let unit = fit_unit(spec, &d, &y, opts, x0.as_deref())?;
    Ok(unit.into_result(spec, &d))
}

/// τ with the Perron vector of the previous call as warm start.
struct WarmTau<'a> {
    spec: &'a ModelSpec,
    mu: &'a MomentVector,
    m: usize,
    mode: SpectralMode,
    vector: Option<DVector<f64>>,
}

impl WarmTau<'_> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let theta = ParamVector::from_slice(self.spec, x)?;
        let mat = match self.mode {
            SpectralMode::Radius => expected_kron_symmetric(self.spec, &theta, self.mu, self.m)?,
            SpectralMode::Norm => {
                let full = expected_kron(self.spec, &theta, self.mu, self.m)?;
                full.transpose() * &full
            }
        };
        let out = perron_from(&mat, self.vector.as_ref())?;
        self.vector = Some(out.vector);
        Ok(match self.mode {
            SpectralMode::Radius => out.value,
            SpectralMode::Norm => out.value.max(0.0).sqrt(),
        })
    }
}

fn tau_at(spec: &ModelSpec, x: &[f64], mu: &MomentVector, m: usize, mode: SpectralMode) -> Result<f64> {
    tau(spec, &ParamVector::from_slice(spec, x)?, mu, m, mode)
}

/// Bisection on s ∈ [lo, hi] for the path `point(s)`, where `lo` satisfies the
/// restriction and `hi` violates it. Returns the satisfying end once τ is
/// within ε_c of one.
fn bisect_onto_boundary<P: Fn(f64) -> Vec<f64>>(
    spec: &ModelSpec,
    mu: &MomentVector,
    m: usize,
    mode: SpectralMode,
    direction: Direction,
    point: P,
    mut lo: f64,
    mut hi: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut best = (point(lo), tau_at(spec, &point(lo), mu, m, mode)?);
    for _ in 0..200 {
        if (best.1 - 1.0).abs() <= CONSTRAINT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let x = point(mid);
        let t = tau_at(spec, &x, mu, m, mode)?;
        if direction.violation(t) == 0.0 {
            lo = mid;
            best = (x, t);
        } else {
            hi = mid;
        }
        if lo == mid && hi == mid {
            break;
        }
    }
    Ok(best)
}

/// Constrained fit on unit-scale data: exterior quadratic penalty on the
/// violation of the τ restriction, then a move onto the boundary and a final
/// re-optimisation of ω (τ does not depend on ω).
pub(crate) fn fit_constrained_unit(
    spec: &ModelSpec,
    design: &Normalized,
    unconstrained: &UnitFit,
    mu: &MomentVector,
    m: usize,
    mode: SpectralMode,
    direction: Direction,
    opts: &OptimOptions,
) -> Result<UnitFit> {
    let tau0 = tau_at(spec, &unconstrained.theta, mu, m, mode)?;
    if direction.violation(tau0) == 0.0 {
        let mut out = unconstrained.clone();
        out.tau = Some(tau0);
        return Ok(out);
    }
    let fixed = unit_fixed(spec, design, &opts.fixed)?;
    let bounds = bounds(spec, &fixed);
    let q = spec.q;
    let r = spec.n_params();
    let z2 = &design.z2;
    let sign = match direction {
        Direction::UpperTail => 1.0,
        Direction::LowerTail => -1.0,
    };
    let free: Vec<usize> = (1..r).filter(|i| bounds.lower[*i] < bounds.upper[*i]).collect();

    let mut warm = WarmTau { spec, mu, m, mode, vector: None };
    let mut failure: Option<Error> = None;
    let mut x = unconstrained.theta.clone();
    let mut iterations = unconstrained.iterations;
    let mut stage_converged = false;
    let mopts = MinimizeOptions {
        max_iterations: opts.max_iterations,
        grad_tol: opts.tolerance_obj.max(1e-7),
        step_tol: opts.tolerance_param,
        ..MinimizeOptions::default()
    };
    for &kappa in &opts.penalty_schedule {
        let penalized = |x: &[f64], g: Option<&mut [f64]>| -> f64 {
            let want = g.is_some();
            let mut buf = vec![0.0; r];
            let f = objective(q, x, z2, design.m2, z2, if want { Some(&mut buf) } else { None });
            let t = match warm.eval(x) {
                Ok(t) => t,
                Err(e) => {
                    failure.get_or_insert(e);
                    return f64::INFINITY;
                }
            };
            let viol = direction.violation(t);
            if let Some(g) = g {
                g.copy_from_slice(&buf);
                if viol > 0.0 {
                    let mut xh = x.to_vec();
                    for &i in &free {
                        let h = 1e-7 * (1.0 + x[i].abs());
                        let step = if x[i] + h <= bounds.upper[i] { h } else { -h };
                        xh[i] = x[i] + step;
                        let th = warm.eval(&xh).unwrap_or(f64::NAN);
                        xh[i] = x[i];
                        g[i] += 2.0 * kappa * viol * sign * (th - t) / step;
                    }
                    // restore the warm vector at x itself
                    let _ = warm.eval(x);
                }
            }
            f + kappa * viol * viol
        };
        let res = projected_bfgs(penalized, &x, &bounds, &mopts);
        iterations += res.iterations;
        if let Some(e) = failure.take() {
            return Err(e);
        }
        stage_converged = res.converged;
        x = res.x;
    }

    // move onto the boundary
    let t = tau_at(spec, &x, mu, m, mode)?;
    let alphas: Vec<usize> = free.iter().copied().filter(|i| *i <= q).collect();
    let (mut x, t) = if direction.violation(t) > 0.0 {
        match direction {
            Direction::UpperTail => {
                let base = x.clone();
                let shrink = |lambda: f64| {
                    let mut v = base.clone();
                    for &i in &alphas {
                        v[i] *= lambda;
                    }
                    v
                };
                if direction.violation(tau_at(spec, &shrink(0.0), mu, m, mode)?) > 0.0 {
                    return Err(Error::Infeasible(format!("τ > 1 even with every free α at zero (m = {m})")));
                }
                bisect_onto_boundary(spec, mu, m, mode, direction, shrink, 0.0, 1.0)?
            }
            Direction::LowerTail => {
                let base = x.clone();
                let dir: Vec<f64> = if alphas.iter().any(|&i| base[i] > 0.0) {
                    alphas.iter().map(|&i| base[i]).collect()
                } else {
                    vec![1.0; alphas.len()]
                };
                let lambda_max = alphas
                    .iter()
                    .zip(&dir)
                    .filter(|(_, d)| **d > 0.0)
                    .map(|(&i, d)| (COEF_MAX - base[i]) / d)
                    .fold(f64::INFINITY, f64::min);
                if !lambda_max.is_finite() {
                    return Err(Error::Infeasible(format!("no free α to raise τ to one (m = {m})")));
                }
                let expand = |lambda: f64| {
                    let mut v = base.clone();
                    for (&i, d) in alphas.iter().zip(&dir) {
                        v[i] = (base[i] + lambda * d).min(COEF_MAX);
                    }
                    v
                };
                if direction.violation(tau_at(spec, &expand(lambda_max), mu, m, mode)?) > 0.0 {
                    return Err(Error::Infeasible(format!("τ < 1 for every α in the box (m = {m})")));
                }
                bisect_onto_boundary(spec, mu, m, mode, direction, expand, lambda_max, 0.0)?
            }
        }
    } else if (t - 1.0).abs() > CONSTRAINT_TOL {
        // overshoot: walk back towards the unconstrained estimate
        let from = x.clone();
        let to = unconstrained.theta.clone();
        let segment = |s: f64| from.iter().zip(&to).map(|(a, b)| a + s * (b - a)).collect::<Vec<f64>>();
        bisect_onto_boundary(spec, mu, m, mode, direction, segment, 0.0, 1.0)?
    } else {
        (x, t)
    };

    // re-optimise ω with α, β held
    let mut pinned = fixed.clone();
    for i in 1..r {
        pinned.retain(|(j, _)| *j != i);
        pinned.push((i, x[i]));
    }
    let ob = self::bounds(spec, &pinned);
    let y2 = z2;
    let omega_fit = projected_bfgs(
        |v: &[f64], g: Option<&mut [f64]>| objective(q, v, z2, design.m2, y2, g),
        &x,
        &ob,
        &opts.minimize(),
    );
    iterations += omega_fit.iterations;
    if omega_fit.f.is_finite() {
        x = omega_fit.x.clone();
    }
    let f = objective(q, &x, z2, design.m2, z2, None);
    let res = MinimizeResult {
        x,
        f,
        grad: vec![],
        projected_grad: omega_fit.projected_grad,
        iterations,
        evaluations: 0,
        converged: stage_converged && omega_fit.converged,
    };
    let mut out = UnitFit::new(spec, design, &design.z, res, iterations);
    out.tau = Some(t);
    Ok(out)
}

/// QML estimate over {θ : τ(θ, μ̂) ≤ 1} (or ≥ 1 for the lower-tail null).
pub fn fit_constrained(
    spec: &ModelSpec,
    series: &ReturnSeries,
    mu_hat: &MomentVector,
    m: usize,
    mode: SpectralMode,
    direction: Direction,
    opts: &OptimOptions,
) -> Result<FitResult> {
    let design = Normalized::new(series.values())?;
    let unit = fit_unit(spec, &design, &design.z, opts, None)?;
    let c = fit_constrained_unit(spec, &design, &unit, mu_hat, m, mode, direction, opts)?;
    Ok(c.into_result(spec, &design))
}

/// As [`fit_constrained`], reusing an unconstrained fit of the same series.
pub fn fit_constrained_from(
    series: &ReturnSeries,
    unconstrained: &FitResult,
    mu_hat: &MomentVector,
    m: usize,
    mode: SpectralMode,
    direction: Direction,
    opts: &OptimOptions,
) -> Result<FitResult> {
    let spec = &unconstrained.spec;
    let design = Normalized::new(series.values())?;
    let x = design.to_unit(&unconstrained.theta_hat);
    let y2 = &design.z2;
    let f = objective(spec.q, &x, &design.z2, design.m2, y2, None);
    let res = MinimizeResult {
        x,
        f,
        grad: vec![],
        projected_grad: unconstrained.gradient_norm,
        iterations: unconstrained.iterations,
        evaluations: 0,
        converged: unconstrained.converged,
    };
    let unit = UnitFit::new(spec, &design, &design.z, res, unconstrained.iterations);
    let c = fit_constrained_unit(spec, &design, &unit, mu_hat, m, mode, direction, opts)?;
    Ok(c.into_result(spec, &design))
}

/// Plug-in blocks of the asymptotic covariance of √n(θ̂ − θ₀, μ̂ − μ) for
/// ARCH/GARCH, with μ = (μ₂, …, μ_{2m}).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBlocks {
    pub j: DMatrix<f64>,
    pub omega: DVector<f64>,
    pub nu: DVector<f64>,
    pub xi: DVector<f64>,
    pub upsilon: DMatrix<f64>,
    /// Lower-right block of Σ.
    pub xi_matrix: DMatrix<f64>,
    pub mu4: f64,
    pub sigma: DMatrix<f64>,
}

impl SigmaBlocks {
    /// Asymptotic variances of √n(θ̂ − θ₀), i.e. diag of the top-left block.
    pub fn theta_variances(&self) -> Vec<f64> {
        let r = self.j.nrows();
        (0..r).map(|i| self.sigma[(i, i)]).collect()
    }
}

/// Ĵ = (1/n)Σ D̂_t D̂_t′ and Ω̂ = (1/n)Σ D̂_t with D̂_t = ∂σ̃_t²/∂θ / (2σ̃_t²).
fn information(spec: &ModelSpec, theta: &ParamVector, series: &ReturnSeries) -> (DMatrix<f64>, DVector<f64>) {
    let r = spec.n_params();
    let z2: Vec<f64> = series.values().iter().map(|v| v * v).collect();
    let n = z2.len() as f64;
    let m2 = z2.iter().sum::<f64>() / n;
    let mut j = DMatrix::zeros(r, r);
    let mut omega = DVector::zeros(r);
    let mut dt = DVector::zeros(r);
    garch_pass(spec.q, &theta.to_vec(), &z2, m2, true, |_, s, d| {
        for k in 0..r {
            dt[k] = d[k] / (2.0 * s);
        }
        omega += &dt;
        j.syger(1.0, &dt, &dt, 1.0);
    });
    j.fill_upper_triangle_with_lower_triangle();
    (j / n, omega / n)
}

fn degenerate_directions(j: &DMatrix<f64>) -> String {
    let eig = j.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let names = |k: usize| if k == 0 { "ω".to_string() } else { format!("θ[{k}]") };
    let mut parts = Vec::new();
    for (idx, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam <= 1e-10 * top {
            let v = eig.eigenvectors.column(idx);
            let desc: Vec<String> = v
                .iter()
                .enumerate()
                .filter(|(_, c)| c.abs() > 1e-6)
                .map(|(k, c)| format!("{c:+.3}·{}", names(k)))
                .collect();
            parts.push(format!("λ = {lam:.3e} along {}", desc.join(" ")));
        }
    }
    if parts.is_empty() {
        "Ĵ is numerically singular".into()
    } else {
        parts.join("; ")
    }
}

pub fn sigma_blocks(fit: &FitResult, series: &ReturnSeries, m: usize) -> Result<SigmaBlocks> {
    let spec = &fit.spec;
    check_family(spec)?;
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    if fit.residuals.len() != series.len() {
        return Err(Error::InvalidInput("fit and series lengths differ".into()));
    }
    let r = spec.n_params();
    let (j, omega) = information(spec, &fit.theta_hat, series);
    let chol = j.clone().cholesky().ok_or_else(|| Error::Degenerate(degenerate_directions(&j)))?;
    let eig_min = j.clone().symmetric_eigen().eigenvalues.min();
    if !(eig_min > 1e-12 * j.amax()) {
        return Err(Error::Degenerate(degenerate_directions(&j)));
    }
    let j_inv = chol.inverse();

    // even residual moments μ_{2k}, k = 0..2m
    let n = fit.residuals.len() as f64;
    let mut mom = vec![0.0; 2 * m + 1];
    for e in &fit.residuals {
        let e2 = e * e;
        let mut pw = 1.0;
        for v in mom.iter_mut() {
            *v += pw;
            pw *= e2;
        }
    }
    mom.iter_mut().for_each(|v| *v /= n);
    if mom.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("accumulating residual moments".into()));
    }
    let mu4 = mom[2];
    let nu = DVector::from_fn(m, |k, _| 2.0 * (k + 1) as f64 * mom[k + 1]);
    let xi = DVector::from_fn(m, |k, _| mom[k + 2] - mom[k + 1] * mom[1]);
    let upsilon = DMatrix::from_fn(m, m, |k, l| mom[k + l + 2] - mom[k + 1] * mom[l + 1]);

    let kappa = (mu4 - 1.0) / 4.0;
    let jo = &j_inv * &omega;
    let c = omega.dot(&jo);
    let cross_row = &xi * 0.5 - &nu * kappa;
    let cross = &jo * cross_row.transpose();
    let xi_matrix = &upsilon + (&nu * nu.transpose()) * (c * kappa) - (&xi * nu.transpose() + &nu * xi.transpose()) * (c / 2.0);

    let dim = r + m;
    let mut sigma = DMatrix::zeros(dim, dim);
    sigma.view_mut((0, 0), (r, r)).copy_from(&(&j_inv * kappa));
    sigma.view_mut((0, r), (r, m)).copy_from(&cross);
    sigma.view_mut((r, 0), (m, r)).copy_from(&cross.transpose());
    sigma.view_mut((r, r), (m, m)).copy_from(&xi_matrix);
    Ok(SigmaBlocks { j, omega, nu, xi, upsilon, xi_matrix, mu4, sigma })
}

/// ς² = ∇τ′ Σ ∇τ for τ = Σ_k C(m,k) α^k β^{m−k} μ_{2k}, with ∇τ taken in
/// (ω, α, β, μ₂, …, μ_{2m}) and ∂τ/∂ω = 0.
pub fn wald_variance_from(blocks: &SigmaBlocks, alpha: f64, beta: f64, mu: &MomentVector, m: usize) -> Result<f64> {
    if blocks.sigma.nrows() != 3 + m || mu.mu.len() < m {
        return Err(Error::InvalidInput("Σ blocks do not match GARCH(1,1) at this m".into()));
    }
    let g = closed_form_garch11_gradient(alpha, beta, mu, m);
    let mut grad = DVector::zeros(3 + m);
    grad[1] = g.alpha;
    grad[2] = g.beta;
    for k in 0..m {
        grad[3 + k] = g.mu[k];
    }
    Ok((grad.transpose() * &blocks.sigma * &grad)[(0, 0)])
}

/// Asymptotic variance of √n(T̂ − T) for a GARCH(1,1) fit.
pub fn wald_variance_garch11(fit: &FitResult, series: &ReturnSeries, m: usize) -> Result<f64> {
    if !(fit.spec.family == Family::Garch && fit.spec.p == 1 && fit.spec.q == 1) {
        return Err(Error::Unsupported(format!(
            "the closed-form Wald variance ({}({},{}))",
            fit.spec.family, fit.spec.p, fit.spec.q
        )));
    }
    let blocks = sigma_blocks(fit, series, m)?;
    let mu = crate::model::estimate_moments(&fit.residuals, &fit.spec, m)?;
    wald_variance_from(&blocks, fit.theta_hat.alpha[0], fit.theta_hat.beta[0], &mu, m)
}

/// T̂ for a GARCH(1,1) fit via the closed form.
pub fn closed_form_statistic(fit: &FitResult, m: usize) -> Result<f64> {
    let mu = crate::model::estimate_moments(&fit.residuals, &fit.spec, m)?;
    Ok(closed_form_garch11(fit.theta_hat.alpha[0], fit.theta_hat.beta[0], &mu, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{estimate_moments, simulate};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn garch_data(n: usize, seed: u64) -> ReturnSeries {
        garch_data_with(n, seed, 0.05, 0.9)
    }

    fn garch_data_with(n: usize, seed: u64, alpha: f64, beta: f64) -> ReturnSeries {
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(0.08, vec![alpha], vec![beta]);
        simulate(&spec, &theta, &gaussian(n + 500, seed), 500).unwrap()
    }

    #[test]
    fn objective_value_example() {
        let spec = ModelSpec::arch(1);
        let series = ReturnSeries::new(vec![1.0]).unwrap();
        // presample ε̃² = 1, σ̃₁² = 0.5 + 0.5·1 = 1
        let theta = ParamVector::new(0.5, vec![0.5], vec![]);
        assert_relative_eq!(negative_qll(&spec, &theta, &series).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn white_noise_score_in_omega() {
        let spec = ModelSpec::garch(1, 1);
        let series = ReturnSeries::new(gaussian(200, 3)).unwrap();
        let s2 = series.second_moment();
        let omega = 1.3;
        let theta = ParamVector::new(omega, vec![0.0], vec![0.0]);
        let g = qll_score(&spec, &theta, &series).unwrap();
        let expected = series.values().iter().map(|e| (1.0 - e * e / omega) / (2.0 * omega)).sum::<f64>() / 200.0;
        assert_relative_eq!(g[0], expected, max_relative = 1e-12);
        let at_mle = qll_score(&spec, &ParamVector::new(s2, vec![0.0], vec![0.0]), &series).unwrap();
        assert!(at_mle[0].abs() < 1e-14);
    }

    #[test]
    fn white_noise_omega_is_variance() {
        let spec = ModelSpec::garch(1, 1);
        let series = ReturnSeries::new(gaussian(300, 4)).unwrap();
        let opts = OptimOptions { fixed: vec![(1, 0.0), (2, 0.0)], ..OptimOptions::default() };
        let fit = fit(&spec, &series, &opts).unwrap();
        assert!(fit.converged);
        // within optimizer tolerance: |∂f/∂ω| < 1e-9 on unit-scale data
        assert_relative_eq!(fit.theta_hat.omega, series.second_moment(), max_relative = 1e-8);
    }

    #[test]
    fn constant_series() {
        let spec = ModelSpec::garch(1, 1);
        let series = ReturnSeries::new(vec![1.5; 50]).unwrap();
        assert!(matches!(fit(&spec, &series, &OptimOptions::default()), Err(Error::Degenerate(_))));
        let opts = OptimOptions { fixed: vec![(1, 0.0), (2, 0.0)], ..OptimOptions::default() };
        let fit = fit(&spec, &series, &opts).unwrap();
        assert_relative_eq!(fit.theta_hat.omega, 2.25, max_relative = 1e-8);
        let zero = ReturnSeries::new(vec![0.0; 50]).unwrap();
        assert!(matches!(super::fit(&spec, &zero, &OptimOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fit_recovers_parameters_and_normalizes_residuals() {
        let spec = ModelSpec::garch(1, 1);
        let series = garch_data(4000, 11);
        let fit = fit(&spec, &series, &OptimOptions::default()).unwrap();
        assert!(fit.converged, "{fit:?}");
        let mean_sq = fit.residuals.iter().map(|e| e * e).sum::<f64>() / 4000.0;
        assert!((mean_sq - 1.0).abs() < 1e-6, "{mean_sq}");
        assert!((fit.theta_hat.beta[0] - 0.9).abs() < 0.1);
        let score = qll_score(&spec, &fit.theta_hat, &series).unwrap();
        let direct = filter_volatility(&spec, &fit.theta_hat, &series).unwrap();
        for (a, b) in direct.sigma2.iter().zip(&fit.vol.sigma2) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
        // score in original units is the unit-scale score divided by s² in ω
        assert!(score[1].abs() < 1e-8 && score[2].abs() < 1e-8, "{score:?}");
    }

    #[test]
    fn scaling_the_series_maps_omega_only() {
        let spec = ModelSpec::garch(1, 2);
        let series = garch_data(1500, 5);
        let a = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let b = fit(&spec, &series.scaled(2.0).unwrap(), &OptimOptions::default()).unwrap();
        assert_eq!(a.residuals, b.residuals);
        assert_eq!(a.theta_hat.alpha, b.theta_hat.alpha);
        assert_eq!(a.theta_hat.beta, b.theta_hat.beta);
        assert_eq!(4.0 * a.theta_hat.omega, b.theta_hat.omega);
    }

    #[test]
    fn constrained_fit_lands_on_boundary() {
        let spec = ModelSpec::garch(1, 1);
        let series = garch_data_with(2000, 8, 0.2, 0.75);
        let unc = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let mu = estimate_moments(&unc.residuals, &spec, 4).unwrap();
        let t_hat = tau(&spec, &unc.theta_hat, &mu, 4, SpectralMode::Radius).unwrap();
        // population τ at m = 4 is about 1.59 for this design
        assert!(t_hat > 1.0, "{t_hat} {:?} {:?}", unc.theta_hat, mu);
        let c = fit_constrained_from(&series, &unc, &mu, 4, SpectralMode::Radius, Direction::UpperTail, &OptimOptions::default())
            .unwrap();
        let t = c.tau_at_solution.unwrap();
        assert!(t <= 1.0 && t >= 1.0 - CONSTRAINT_TOL, "{t}");
        assert_relative_eq!(t, tau(&spec, &c.theta_hat, &mu, 4, SpectralMode::Radius).unwrap(), epsilon = 1e-12);
        assert!(c.loglik <= unc.loglik);

        // an inactive restriction returns the unconstrained estimate
        let same = fit_constrained_from(&series, &unc, &mu, 1, SpectralMode::Radius, Direction::UpperTail, &OptimOptions::default())
            .unwrap();
        assert_eq!(same.theta_hat, unc.theta_hat);
        assert!(same.constrained);
    }

    #[test]
    fn lower_tail_constraint() {
        let spec = ModelSpec::garch(1, 1);
        let series = garch_data(2000, 9);
        let unc = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let mu = estimate_moments(&unc.residuals, &spec, 1).unwrap();
        let c = fit_constrained_from(&series, &unc, &mu, 1, SpectralMode::Radius, Direction::LowerTail, &OptimOptions::default())
            .unwrap();
        let t = c.tau_at_solution.unwrap();
        assert!(t >= 1.0 && t <= 1.0 + CONSTRAINT_TOL, "{t}");
        assert!(c.loglik <= unc.loglik);
    }

    #[test]
    fn sigma_blocks_structure() {
        let spec = ModelSpec::garch(1, 1);
        let series = garch_data(3000, 21);
        let fit = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let b = sigma_blocks(&fit, &series, 2).unwrap();
        let r = 3;
        let j_inv = b.j.clone().try_inverse().unwrap();
        let top = j_inv * ((b.mu4 - 1.0) / 4.0);
        for i in 0..r {
            for k in 0..r {
                assert_relative_eq!(b.sigma[(i, k)], top[(i, k)], max_relative = 1e-10);
            }
        }
        assert_relative_eq!(b.sigma.clone(), b.sigma.transpose(), epsilon = 1e-12);
        // μ̂₂ ≡ 1 at an interior optimum, so its row of Σ vanishes
        for k in 0..r + 2 {
            assert!(b.sigma[(r, k)].abs() < 1e-5 * b.sigma.amax(), "{}", b.sigma);
        }
        assert!(b.j.clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn nu_for_gaussian_moments() {
        // ν_k = 2k μ_{2k}: exact Gaussian moments at m = 2 give (2, 12)
        let mu = MomentVector::gaussian(2);
        let nu: Vec<f64> = (1..=2).map(|k| 2.0 * k as f64 * mu.even(k)).collect();
        assert_eq!(nu, vec![2.0, 12.0]);
    }

    #[test]
    fn wald_variance_with_alpha_fixed_at_zero() {
        let spec = ModelSpec::garch(1, 1);
        let series = garch_data(3000, 17);
        let fit = fit(&spec, &series, &OptimOptions::default()).unwrap();
        let mut blocks = sigma_blocks(&fit, &series, 2).unwrap();
        // α held at zero: no sampling variance in the α direction
        for k in 0..5 {
            blocks.sigma[(1, k)] = 0.0;
            blocks.sigma[(k, 1)] = 0.0;
        }
        let beta = fit.theta_hat.beta[0];
        let mu = estimate_moments(&fit.residuals, &spec, 2).unwrap();
        let v = wald_variance_from(&blocks, 0.0, beta, &mu, 2).unwrap();
        assert_relative_eq!(v, (2.0 * beta).powi(2) * blocks.sigma[(2, 2)], max_relative = 1e-12);
        assert!(wald_variance_garch11(&fit, &series, 2).unwrap() > 0.0);
        let other = ModelSpec::garch(1, 2);
        let f2 = super::fit(&other, &series, &OptimOptions::default()).unwrap();
        assert!(matches!(wald_variance_garch11(&f2, &series, 2), Err(Error::Unsupported(_))));
    }
}
