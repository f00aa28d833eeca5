//! Companion matrices A(θ, η), their Kronecker powers, the polynomial
//! decomposition `A(θ,η)^{⊗m} = Σ_k B_{k,m}(θ) u(η)^k` and the moment
//! functional τ(θ, μ) = ρ(E[A^{⊗m}]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_moments, Family, ModelSpec, MomentVector, ParamVector};

/// Largest admissible dimension of a Kronecker power.
pub const KRON_DIM_CAP: usize = 10_000;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 100_000;
const PLAIN_PHASE: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralMode {
    /// Largest-modulus eigenvalue.
    #[default]
    Radius,
    /// Largest singular value √λ_max(M′M).
    Norm,
}

impl std::str::FromStr for SpectralMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radius" => Ok(SpectralMode::Radius),
            "norm" => Ok(SpectralMode::Norm),
            other => Err(Error::InvalidInput(format!("unknown spectral mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SpectralMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpectralMode::Radius => "radius",
            SpectralMode::Norm => "norm",
        })
    }
}

/// The η-free part of A and one coefficient matrix per innovation transform.
struct AParts {
    constant: DMatrix<f64>,
    channel: Vec<DMatrix<f64>>,
}

fn a_parts(spec: &ModelSpec, theta: &ParamVector) -> Result<AParts> {
    spec.validate()?;
    theta.validate(spec)?;
    let channels = spec.channels();
    let na = spec.n_alpha();
    let dim = spec.state_dim();
    let coeffs: Vec<f64> = theta.alpha.iter().chain(&theta.beta).copied().collect();

    let mut constant = DMatrix::zeros(dim, dim);
    // ARCH-lag shift rows: row i carries the state entry of column i - channels
    for row in channels..na {
        constant[(row, row - channels)] = 1.0;
    }
    if spec.p > 0 {
        for (col, c) in coeffs.iter().enumerate() {
            constant[(na, col)] = *c;
        }
        for row in na + 1..dim {
            constant[(row, row - 1)] = 1.0;
        }
    }
    let channel = (0..channels)
        .map(|c| {
            let mut b = DMatrix::zeros(dim, dim);
            for (col, v) in coeffs.iter().enumerate() {
                b[(c, col)] = *v;
            }
            b
        })
        .collect();
    Ok(AParts { constant, channel })
}

/// A(θ, η) laid out as in the companion form of the squared recursion.
pub fn build_a(spec: &ModelSpec, theta: &ParamVector, eta: f64) -> Result<DMatrix<f64>> {
    let parts = a_parts(spec, theta)?;
    let u = spec.transform(eta);
    let mut a = parts.constant;
    for (c, b) in parts.channel.iter().enumerate() {
        a += b * u[c];
    }
    Ok(a)
}

fn check_power_dim(base: usize, m: usize) -> Result<usize> {
    let mut dim: usize = 1;
    for _ in 0..m {
        dim = dim
            .checked_mul(base)
            .filter(|d| *d <= KRON_DIM_CAP)
            .ok_or(Error::DimensionOverflow { dim: base.saturating_pow(m as u32), cap: KRON_DIM_CAP })?;
    }
    Ok(dim)
}

/// out += a ⊗ b, visiting only the non-zero entries of b.
fn kron_accumulate(out: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let (rb, cb) = b.shape();
    let nz: Vec<(usize, usize, f64)> = (0..cb)
        .flat_map(|c| (0..rb).map(move |r| (r, c)))
        .filter_map(|(r, c)| {
            let v = b[(r, c)];
            (v != 0.0).then_some((r, c, v))
        })
        .collect();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for &(r, c, v) in &nz {
                out[(i * rb + r, j * cb + c)] += aij * v;
            }
        }
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    kron_accumulate(&mut out, a, b);
    out
}

/// M ⊗ M ⊗ … ⊗ M (m factors).
pub fn kron_power(matrix: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("Kronecker power needs m >= 1".into()));
    }
    if !matrix.is_square() {
        return Err(Error::InvalidInput("Kronecker power of a non-square matrix".into()));
    }
    check_power_dim(matrix.nrows(), m)?;
    let mut out = matrix.clone();
    for _ in 1..m {
        out = kron(&out, matrix);
    }
    Ok(out)
}

/// `B_{0,m}, …, B_{m,m}` with `A(θ,η)^{⊗m} = Σ_k B_{k,m} u(η)^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerDecomposition {
    pub m: usize,
    pub b: Vec<DMatrix<f64>>,
}

impl KroneckerDecomposition {
    /// Σ_k B_{k,m} c_k.
    pub fn combine(&self, coefficients: &[f64]) -> DMatrix<f64> {
        let dim = self.b[0].nrows();
        let mut out = DMatrix::zeros(dim, dim);
        for (b, c) in self.b.iter().zip(coefficients) {
            if *c != 0.0 {
                out.zip_apply(b, |o, v| *o += c * v);
            }
        }
        out
    }
}

pub fn coefficient_matrices(spec: &ModelSpec, theta: &ParamVector, m: usize) -> Result<KroneckerDecomposition> {
    if spec.family.is_threshold() {
        return Err(Error::Unsupported(format!(
            "single-transform Kronecker decomposition ({} is affine in two transforms)",
            spec.family
        )));
    }
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    check_power_dim(spec.state_dim(), m)?;
    let parts = a_parts(spec, theta)?;
    let b0 = parts.constant;
    let b1 = parts.channel.into_iter().next().expect("one channel");
    let mut level = vec![b0.clone(), b1.clone()];
    for _ in 1..m {
        let dim = level[0].nrows() * b0.nrows();
        let mut next = Vec::with_capacity(level.len() + 1);
        for k in 0..=level.len() {
            let mut acc = DMatrix::zeros(dim, dim);
            if k < level.len() {
                kron_accumulate(&mut acc, &level[k], &b0);
            }
            if k > 0 {
                kron_accumulate(&mut acc, &level[k - 1], &b1);
            }
            next.push(acc);
        }
        level = next;
    }
    Ok(KroneckerDecomposition { m, b: level })
}

/// E[u(η)^k] for k = 0..m implied by the family's moment vector.
pub fn transform_moments(spec: &ModelSpec, mu: &MomentVector, m: usize) -> Result<Vec<f64>> {
    if mu.m < m || mu.mu.len() != spec.moment_dim(mu.m) {
        return Err(Error::InvalidInput(format!("moment vector of order {} cannot serve m = {m}", mu.m)));
    }
    match spec.family {
        Family::Arch | Family::Garch => Ok((0..=m).map(|k| mu.even(k)).collect()),
        Family::ApGarch => {
            // |η| − γη = (1−γ)η⁺ + (1+γ)η⁻ and η⁺η⁻ = 0
            let delta = spec.delta.unwrap_or(2.0);
            let gamma = spec.gamma.unwrap_or(0.0);
            let half = mu.m;
            let mut out = vec![1.0];
            for k in 1..=m {
                let e = delta * k as f64;
                out.push((1.0 - gamma).powf(e) * mu.mu[k - 1] + (1.0 + gamma).powf(e) * mu.mu[half + k - 1]);
            }
            Ok(out)
        }
        Family::TGarch | Family::GjrGarch => Err(Error::Unsupported(
            "moment-based E[A^{⊗m}] (use the residual-average form)".into(),
        )),
    }
}

/// E[A(θ,η)^{⊗m}] = Σ_k B_{k,m}(θ) E[u^k].
pub fn expected_kron(spec: &ModelSpec, theta: &ParamVector, mu: &MomentVector, m: usize) -> Result<DMatrix<f64>> {
    let weights = transform_moments(spec, mu, m)?;
    Ok(coefficient_matrices(spec, theta, m)?.combine(&weights))
}

/// (1/n) Σ_t A(θ, η_t)^{⊗m}.
pub fn empirical_kron(spec: &ModelSpec, theta: &ParamVector, residuals: &[f64], m: usize) -> Result<DMatrix<f64>> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput("no residuals".into()));
    }
    let dim = check_power_dim(spec.state_dim(), m)?;
    let mut acc = DMatrix::zeros(dim, dim);
    for &eta in residuals {
        acc += kron_power(&build_a(spec, theta, eta)?, m)?;
    }
    Ok(acc / residuals.len() as f64)
}

/// Result of a dominant-eigenvalue iteration.
#[derive(Debug, Clone)]
pub struct PowerOutcome {
    pub value: f64,
    pub vector: DVector<f64>,
    pub iterations: usize,
}

struct PowerState {
    lambda: f64,
    diff: f64,
    iterations: usize,
}

fn power_phase(
    matrix: &DMatrix<f64>,
    shift: f64,
    x: &mut DVector<f64>,
    max_iter: usize,
) -> std::result::Result<PowerOutcome, PowerState> {
    let n = matrix.nrows();
    let mut y = DVector::zeros(n);
    let mut prev_diff = f64::INFINITY;
    let mut lambda = 0.0;
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        y.gemv(1.0, matrix, x, 0.0);
        if shift != 0.0 {
            y.axpy(shift, x, 1.0);
        }
        lambda = y.norm();
        if lambda == 0.0 || !lambda.is_finite() {
            return if lambda == 0.0 {
                Ok(PowerOutcome { value: 0.0, vector: x.clone(), iterations: it })
            } else {
                Err(PowerState { lambda, diff, iterations: it })
            };
        }
        y /= lambda;
        diff = (&y - &*x).amax();
        std::mem::swap(x, &mut y);
        let rate = if prev_diff.is_finite() && prev_diff > 0.0 {
            (diff / prev_diff).min(0.999)
        } else {
            0.999
        };
        let remaining = diff * rate / (1.0 - rate);
        if diff <= 1e-15 || (it > 2 && remaining <= POWER_TOL) {
            // Rayleigh-type refinement: λ = ‖(M + sI)x‖ for the converged unit x
            y.gemv(1.0, matrix, x, 0.0);
            if shift != 0.0 {
                y.axpy(shift, x, 1.0);
            }
            return Ok(PowerOutcome { value: y.norm() - shift, vector: x.clone(), iterations: it });
        }
        prev_diff = diff;
    }
    Err(PowerState { lambda: lambda - shift, diff, iterations: max_iter })
}

/// ρ via lim ‖M^k‖^{1/k}, evaluated with repeated squaring.
fn gelfand_radius(matrix: &DMatrix<f64>) -> Option<f64> {
    let norm = matrix.norm();
    if norm == 0.0 {
        return Some(0.0);
    }
    let mut p = matrix / norm;
    let mut log_scale = norm.ln();
    let mut k = 1.0;
    let mut prev = f64::NAN;
    for _ in 0..60 {
        let sq = &p * &p;
        let nrm = sq.norm();
        if nrm == 0.0 {
            return Some(0.0);
        }
        log_scale = 2.0 * log_scale + nrm.ln();
        k *= 2.0;
        p = sq / nrm;
        let est = (log_scale / k).exp();
        if (est - prev).abs() <= POWER_TOL * est.max(1.0) {
            return Some(est);
        }
        prev = est;
    }
    None
}

/// Dominant eigenpair of a non-negative matrix by power iteration from the
/// all-ones vector, with a positive shift if the plain iteration stalls
/// (periodic matrices) and a Gelfand-formula fallback.
pub fn perron(matrix: &DMatrix<f64>) -> Result<PowerOutcome> {
    perron_from(matrix, None)
}

/// As [`perron`], optionally warm-started from a previous eigenvector.
pub fn perron_from(matrix: &DMatrix<f64>, start: Option<&DVector<f64>>) -> Result<PowerOutcome> {
    if !matrix.is_square() || matrix.nrows() == 0 {
        return Err(Error::InvalidInput("spectral value of a non-square or empty matrix".into()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluating a spectral value".into()));
    }
    let n = matrix.nrows();
    let ones = || DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut x = match start {
        Some(s) if s.len() == n && s.iter().all(|v| *v >= 0.0) && s.norm() > 0.0 => {
            // keep the start inside the positive cone so no component is lost
            let mut v = s.normalize() + ones() * 1e-3;
            v.normalize_mut();
            v
        }
        _ => ones(),
    };
    let plain = match power_phase(matrix, 0.0, &mut x, PLAIN_PHASE) {
        Ok(out) => return Ok(out),
        Err(state) => state,
    };
    let shift = plain.lambda.abs().max(matrix.amax() * 1e-3).max(f64::MIN_POSITIVE);
    let mut x = ones();
    let shifted = match power_phase(matrix, shift, &mut x, POWER_MAX_ITER - PLAIN_PHASE) {
        Ok(out) => return Ok(out),
        Err(state) => state,
    };
    match gelfand_radius(matrix) {
        Some(value) => Ok(PowerOutcome { value, vector: x, iterations: POWER_MAX_ITER }),
        None => Err(Error::SpectralNonConvergence(format!(
            "dim {n}: plain phase stopped at λ≈{:.6e} (Δx={:.2e}), shifted phase at λ≈{:.6e} (Δx={:.2e}) after {} iterations; Gelfand fallback unstable",
            plain.lambda, plain.diff, shifted.lambda, shifted.diff, plain.iterations + shifted.iterations
        ))),
    }
}

pub fn spectral_value(matrix: &DMatrix<f64>, mode: SpectralMode) -> Result<f64> {
    match mode {
        SpectralMode::Radius => perron(matrix).map(|o| o.value),
        SpectralMode::Norm => {
            if !matrix.is_square() {
                return Err(Error::InvalidInput("spectral value of a non-square matrix".into()));
            }
            let gram = matrix.transpose() * matrix;
            perron(&gram).map(|o| o.value.max(0.0).sqrt())
        }
    }
}

/// τ(θ, μ) = ‖E[A(θ,η)^{⊗m}]‖ under the chosen spectral functional.
pub fn tau(spec: &ModelSpec, theta: &ParamVector, mu: &MomentVector, m: usize, mode: SpectralMode) -> Result<f64> {
    match mode {
        SpectralMode::Radius => perron(&expected_kron_symmetric(spec, theta, mu, m)?).map(|o| o.value),
        SpectralMode::Norm => spectral_value(&expected_kron(spec, theta, mu, m)?, mode),
    }
}

/// Exponent vectors of the degree-`m` monomials in `d` variables.
fn monomials(d: usize, m: usize) -> Vec<Vec<usize>> {
    if d == 1 {
        return vec![vec![m]];
    }
    let mut out = Vec::new();
    for first in (0..=m).rev() {
        for mut rest in monomials(d - 1, m - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// E[A(θ,η)^{⊗m}] restricted to symmetric tensors, written as the map
/// p(y) ↦ E[p(A(θ,η)′y)] on homogeneous polynomials of degree m in the
/// monomial basis. The matrix is non-negative, of dimension C(d+m−1, m), and
/// has the same spectral radius as the full Kronecker power: the latter
/// commutes with index permutations, so a non-negative Perron vector can be
/// symmetrised.
pub fn expected_kron_symmetric(spec: &ModelSpec, theta: &ParamVector, mu: &MomentVector, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    let weights = transform_moments(spec, mu, m)?;
    let d = spec.state_dim();
    check_power_dim(d, m)?;
    let parts = a_parts(spec, theta)?;
    let b0 = &parts.constant;
    let b1 = &parts.channel[0];

    // monomials of each degree with a lookup for multiplication by y_v
    let levels: Vec<Vec<Vec<usize>>> = (0..=m).map(|j| monomials(d, j)).collect();
    let index: Vec<std::collections::HashMap<Vec<usize>, usize>> = levels
        .iter()
        .map(|l| l.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect())
        .collect();
    let times: Vec<Vec<Vec<usize>>> = (0..m)
        .map(|j| {
            levels[j]
                .iter()
                .map(|e| {
                    (0..d)
                        .map(|v| {
                            let mut f = e.clone();
                            f[v] += 1;
                            index[j + 1][&f]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let top = levels[m].len();
    let deg = m + 1;
    let mut out = DMatrix::zeros(top, top);
    // coefficients indexed [monomial * deg + power of u]
    let mut cur = vec![0.0; top * deg];
    let mut next = vec![0.0; top * deg];
    for (col, expo) in levels[m].iter().enumerate() {
        cur[..deg].fill(0.0);
        cur[0] = 1.0;
        let mut j = 0;
        for (i, &power) in expo.iter().enumerate() {
            for _ in 0..power {
                // multiply by (A′y)_i = Σ_v (B0[v,i] + u B1[v,i]) y_v
                let len = levels[j + 1].len();
                next[..len * deg].fill(0.0);
                for (mono, targets) in times[j].iter().enumerate() {
                    let c = &cur[mono * deg..(mono + 1) * deg];
                    if c.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    for (v, &t) in targets.iter().enumerate() {
                        let (a0, a1) = (b0[(v, i)], b1[(v, i)]);
                        if a0 == 0.0 && a1 == 0.0 {
                            continue;
                        }
                        let dst = &mut next[t * deg..(t + 1) * deg];
                        for k in 0..=j {
                            dst[k] += a0 * c[k];
                            dst[k + 1] += a1 * c[k];
                        }
                    }
                }
                std::mem::swap(&mut cur, &mut next);
                j += 1;
            }
        }
        for row in 0..top {
            out[(row, col)] = (0..deg).map(|k| cur[row * deg + k] * weights[k]).sum();
        }
    }
    Ok(out)
}

/// Σ_k C(m,k) α^k β^{m−k} μ_{2k}.
pub fn closed_form_garch11(alpha: f64, beta: f64, mu: &MomentVector, m: usize) -> f64 {
    (0..=m)
        .map(|k| binomial(m, k) * alpha.powi(k as i32) * beta.powi((m - k) as i32) * mu.even(k))
        .sum()
}

/// Partial derivatives of [`closed_form_garch11`] with respect to α, β and
/// (μ₂, …, μ_{2m}).
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormGradient {
    pub alpha: f64,
    pub beta: f64,
    pub mu: Vec<f64>,
}

pub fn closed_form_garch11_gradient(alpha: f64, beta: f64, mu: &MomentVector, m: usize) -> ClosedFormGradient {
    let mut da = 0.0;
    let mut db = 0.0;
    let mut dmu = vec![0.0; mu.mu.len()];
    for k in 0..=m {
        let c = binomial(m, k) * mu.even(k);
        let j = m - k;
        if k > 0 {
            da += c * k as f64 * alpha.powi(k as i32 - 1) * beta.powi(j as i32);
            dmu[k - 1] = binomial(m, k) * alpha.powi(k as i32) * beta.powi(j as i32);
        }
        if j > 0 {
            db += c * j as f64 * alpha.powi(k as i32) * beta.powi(j as i32 - 1);
        }
    }
    ClosedFormGradient { alpha: da, beta: db, mu: dmu }
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// T̂ = τ(θ, μ̂) with μ̂ the residual moments, or the residual-average form
/// for the two-transform families.
pub fn test_statistic(
    spec: &ModelSpec,
    theta: &ParamVector,
    residuals: &[f64],
    m: usize,
    mode: SpectralMode,
) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput("no residuals".into()));
    }
    if spec.family.is_threshold() {
        spectral_value(&empirical_kron(spec, theta, residuals, m)?, mode)
    } else {
        let mu = estimate_moments(residuals, spec, m)?;
        tau(spec, theta, &mu, m, mode)
    }
}
