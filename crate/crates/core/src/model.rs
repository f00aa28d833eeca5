//! GARCH-family model specifications, path simulation, volatility filtering
//! and innovation moment estimation.
//!
//! Every family is written as a recursion on the power variable
//! `x_t = σ_t^δ`:
//!
//! ```text
//! x_t = ω + Σ_i Σ_c α_{i,c} g_c(ε_{t-i}) + Σ_j β_j x_{t-j}
//! ```
//!
//! where `g_c` are the family's innovation transforms (`ε²` for ARCH/GARCH,
//! `ε⁺, ε⁻` for T-GARCH, `(ε⁺)², (ε⁻)²` for GJR-GARCH and `(|ε| − γε)^δ`
//! for AP-GARCH). The α vector is laid out lag-major, channel-minor:
//! `(α₁⁺, α₁⁻, α₂⁺, α₂⁻, …)` for the threshold families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound enforced on filtered σ̃_t².
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Default number of discarded start-up observations in [`simulate`].
pub const DEFAULT_BURN_IN: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Arch,
    Garch,
    #[serde(rename = "tgarch")]
    TGarch,
    #[serde(rename = "apgarch")]
    ApGarch,
    #[serde(rename = "gjrgarch")]
    GjrGarch,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Arch => "arch",
            Family::Garch => "garch",
            Family::TGarch => "tgarch",
            Family::ApGarch => "apgarch",
            Family::GjrGarch => "gjrgarch",
        }
    }

    /// Threshold families carry a ⁺/⁻ pair of ARCH coefficients per lag.
    pub fn is_threshold(self) -> bool {
        matches!(self, Family::TGarch | Family::GjrGarch)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "arch" => Ok(Family::Arch),
            "garch" => Ok(Family::Garch),
            "tgarch" => Ok(Family::TGarch),
            "apgarch" => Ok(Family::ApGarch),
            "gjrgarch" | "gjr" => Ok(Family::GjrGarch),
            other => Err(Error::InvalidSpec(format!("unknown family '{other}'"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Family identifier plus lag orders. `q` counts ARCH lags, `p` volatility
/// lags, so GARCH(1,2) is `ModelSpec::garch(1, 2)` with one β and two α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub q: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ModelSpec {
    pub fn arch(q: usize) -> Self {
        Self { family: Family::Arch, q, p: 0, delta: None, gamma: None }
    }

    pub fn garch(p: usize, q: usize) -> Self {
        Self { family: Family::Garch, q, p, delta: None, gamma: None }
    }

    pub fn tgarch(p: usize, q: usize) -> Self {
        Self { family: Family::TGarch, q, p, delta: None, gamma: None }
    }

    pub fn gjrgarch(p: usize, q: usize) -> Self {
        Self { family: Family::GjrGarch, q, p, delta: None, gamma: None }
    }

    pub fn apgarch(p: usize, q: usize, delta: f64, gamma: f64) -> Self {
        Self { family: Family::ApGarch, q, p, delta: Some(delta), gamma: Some(gamma) }
    }

    /// Builds and validates a spec from loose parts (CLI / config input).
    pub fn new(family: Family, p: usize, q: usize, delta: Option<f64>, gamma: Option<f64>) -> Result<Self> {
        let spec = Self { family, q, p, delta, gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::InvalidSpec("q must be at least 1".into()));
        }
        match self.family {
            Family::Arch if self.p != 0 => {
                return Err(Error::InvalidSpec("ARCH has no volatility lags (p = 0)".into()))
            }
            Family::Arch => {}
            _ if self.p == 0 => {
                return Err(Error::InvalidSpec(format!("{} requires p >= 1", self.family)))
            }
            _ => {}
        }
        let ap = self.family == Family::ApGarch;
        if ap != self.delta.is_some() || ap != self.gamma.is_some() {
            return Err(Error::InvalidSpec("delta/gamma must be given exactly for AP-GARCH".into()));
        }
        if let Some(d) = self.delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidSpec(format!("delta must be positive, got {d}")));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > -1.0 && g < 1.0) {
                return Err(Error::InvalidSpec(format!("gamma must lie in (-1, 1), got {g}")));
            }
        }
        Ok(())
    }

    /// Number of innovation transforms per ARCH lag.
    pub fn channels(&self) -> usize {
        if self.family.is_threshold() {
            2
        } else {
            1
        }
    }

    pub fn n_alpha(&self) -> usize {
        self.q * self.channels()
    }

    /// Length r of θ.
    pub fn n_params(&self) -> usize {
        1 + self.n_alpha() + self.p
    }

    /// Exponent δ of the power variable x_t = σ_t^δ.
    pub fn power(&self) -> f64 {
        match self.family {
            Family::Arch | Family::Garch | Family::GjrGarch => 2.0,
            Family::TGarch => 1.0,
            Family::ApGarch => self.delta.unwrap_or(2.0),
        }
    }

    /// Dimension of the companion matrix A(θ, η).
    pub fn state_dim(&self) -> usize {
        self.n_alpha() + self.p
    }

    /// Length of h(x) for a given m.
    pub fn moment_dim(&self, m: usize) -> usize {
        match self.family {
            Family::Arch | Family::Garch => m,
            _ => 2 * m,
        }
    }

    /// Innovation transforms g_c(x) driving the recursion.
    #[inline]
    pub fn transform(&self, x: f64) -> [f64; 2] {
        let pos = x.max(0.0);
        let neg = (-x).max(0.0);
        match self.family {
            Family::Arch | Family::Garch => [x * x, 0.0],
            Family::TGarch => [pos, neg],
            Family::GjrGarch => [pos * pos, neg * neg],
            Family::ApGarch => {
                let gamma = self.gamma.unwrap_or(0.0);
                let delta = self.delta.unwrap_or(2.0);
                [(x.abs() - gamma * x).powf(delta), 0.0]
            }
        }
    }
}

/// θ = (ω, α, β).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub omega: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ParamVector {
    pub fn new(omega: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self { omega, alpha, beta }
    }

    /// Unpacks `(ω, α…, β…)` according to the spec's layout.
    pub fn from_slice(spec: &ModelSpec, values: &[f64]) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::ParameterDomain(format!(
                "expected {} parameters, got {}",
                spec.n_params(),
                values.len()
            )));
        }
        let na = spec.n_alpha();
        Ok(Self {
            omega: values[0],
            alpha: values[1..1 + na].to_vec(),
            beta: values[1 + na..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.alpha.len() + self.beta.len());
        v.push(self.omega);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn len(&self) -> usize {
        1 + self.alpha.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn beta_sum(&self) -> f64 {
        self.beta.iter().sum()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.alpha.len() != spec.n_alpha() || self.beta.len() != spec.p {
            return Err(Error::ParameterDomain(format!(
                "{} expects {} alpha and {} beta entries, got {} and {}",
                spec.family,
                spec.n_alpha(),
                spec.p,
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::ParameterDomain(format!("omega must be positive, got {}", self.omega)));
        }
        for (name, v) in self
            .alpha
            .iter()
            .map(|v| ("alpha", v))
            .chain(self.beta.iter().map(|v| ("beta", v)))
        {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::ParameterDomain(format!("{name} entries must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Observed returns ε_1..ε_n (percent log-returns).
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    values: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("return series is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite return at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    /// (1/n) Σ ε_t².
    pub fn second_moment(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

/// Filtered conditional variances σ̃_t².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityPath {
    pub sigma2: Vec<f64>,
    /// σ̃² used for t ≤ 0.
    pub presample_value: f64,
}

impl VolatilityPath {
    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|s| s.sqrt()).collect()
    }
}

/// Presample values for t ≤ 0: the transform channels g_c(ε̃) and the power
/// variable x̃ = σ̃^δ.
#[derive(Debug, Clone, PartialEq)]
pub struct Presample {
    pub transform: [f64; 2],
    pub level: f64,
}

impl Presample {
    /// Presample observations fixed at their sample means (so ε̃_t² = (1/n)Σε_t²
    /// for GARCH), with x̃ the steady state of the recursion fed by those
    /// constant observations. The result is a function of the data only,
    /// which keeps `filter(scale_params(θ, λ)) = λ^δ filter(θ)` exact.
    pub fn from_data(spec: &ModelSpec, theta: &ParamVector, series: &[f64]) -> Self {
        let transform = mean_transform(spec, series);
        let channels = spec.channels();
        let drive: f64 = theta
            .alpha
            .iter()
            .enumerate()
            .map(|(k, a)| a * transform[k % channels])
            .sum();
        let persistence = theta.beta_sum();
        let level = if spec.p == 0 {
            theta.omega + drive
        } else if persistence < 1.0 {
            (theta.omega + drive) / (1.0 - persistence)
        } else {
            let delta = spec.power();
            series.iter().map(|e| e.abs().powf(delta)).sum::<f64>() / series.len() as f64
        };
        Self { transform, level }
    }
}

pub(crate) fn mean_transform(spec: &ModelSpec, series: &[f64]) -> [f64; 2] {
    let mut acc = [0.0; 2];
    for &e in series {
        let g = spec.transform(e);
        acc[0] += g[0];
        acc[1] += g[1];
    }
    let n = series.len() as f64;
    [acc[0] / n, acc[1] / n]
}

/// Runs the power-variable recursion on `obs` and returns x_t for t = 1..n.
fn power_recursion(spec: &ModelSpec, theta: &ParamVector, obs: &[f64], pre: &Presample) -> Vec<f64> {
    let n = obs.len();
    let channels = spec.channels();
    let floor = SIGMA2_FLOOR.powf(spec.power() / 2.0);
    let g: Vec<[f64; 2]> = obs.iter().map(|&e| spec.transform(e)).collect();
    let mut x = Vec::with_capacity(n);
    for t in 0..n {
        let mut v = theta.omega;
        for i in 1..=spec.q {
            let gi = if t >= i { g[t - i] } else { pre.transform };
            for c in 0..channels {
                v += theta.alpha[(i - 1) * channels + c] * gi[c];
            }
        }
        for (j, b) in theta.beta.iter().enumerate() {
            let lag = j + 1;
            let xj = if t >= lag { x[t - lag] } else { pre.level };
            v += b * xj;
        }
        x.push(v.max(floor));
    }
    x
}

fn to_sigma2(spec: &ModelSpec, x: f64) -> f64 {
    let delta = spec.power();
    if delta == 2.0 {
        x
    } else {
        x.powf(2.0 / delta)
    }
}

/// Filters σ̃_t² from the data with the default presample rule.
pub fn filter_volatility(spec: &ModelSpec, theta: &ParamVector, series: &ReturnSeries) -> Result<VolatilityPath> {
    spec.validate()?;
    theta.validate(spec)?;
    let pre = Presample::from_data(spec, theta, series.values());
    filter_with_presample(spec, theta, series, &pre)
}

/// Filters σ̃_t² with caller-supplied presample values.
pub fn filter_with_presample(
    spec: &ModelSpec,
    theta: &ParamVector,
    series: &ReturnSeries,
    pre: &Presample,
) -> Result<VolatilityPath> {
    spec.validate()?;
    theta.validate(spec)?;
    let x = power_recursion(spec, theta, series.values(), pre);
    let sigma2: Vec<f64> = x
        .into_iter()
        .map(|v| to_sigma2(spec, v).max(SIGMA2_FLOOR))
        .collect();
    if sigma2.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("filtering volatilities".into()));
    }
    Ok(VolatilityPath { sigma2, presample_value: to_sigma2(spec, pre.level) })
}

/// θ_λ with σ(·; θ_λ) = λ σ(·; θ) for fixed observations.
pub fn scale_params(spec: &ModelSpec, theta: &ParamVector, lambda: f64) -> Result<ParamVector> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::ParameterDomain(format!("lambda must be positive, got {lambda}")));
    }
    theta.validate(spec)?;
    let factor = lambda.powf(spec.power());
    Ok(ParamVector {
        omega: theta.omega * factor,
        alpha: theta.alpha.iter().map(|a| a * factor).collect(),
        beta: theta.beta.clone(),
    })
}

/// Start-up level of the simulated recursion.
fn simulation_start(spec: &ModelSpec, theta: &ParamVector) -> Presample {
    match spec.family {
        Family::Arch | Family::Garch => {
            let persistence = theta.alpha_sum() + theta.beta_sum();
            let level = if persistence < 1.0 {
                theta.omega / (1.0 - persistence)
            } else {
                theta.omega
            };
            Presample { transform: [level, 0.0], level }
        }
        _ => {
            let persistence = theta.beta_sum();
            let level = if persistence < 1.0 {
                theta.omega / (1.0 - persistence)
            } else {
                theta.omega
            };
            Presample { transform: [0.0, 0.0], level }
        }
    }
}

/// Simulates ε_t = σ_t η_t and returns the post-burn-in returns together with
/// the true σ_t² path.
pub fn simulate_path(
    spec: &ModelSpec,
    theta: &ParamVector,
    innovations: &[f64],
    burn_in: usize,
) -> Result<(ReturnSeries, VolatilityPath)> {
    spec.validate()?;
    theta.validate(spec)?;
    if innovations.len() <= burn_in {
        return Err(Error::InvalidInput(format!(
            "need more than burn_in = {burn_in} innovations, got {}",
            innovations.len()
        )));
    }
    let channels = spec.channels();
    let inv_power = 1.0 / spec.power();
    let start = simulation_start(spec, theta);
    let total = innovations.len();
    let mut eps = Vec::with_capacity(total);
    let mut g: Vec<[f64; 2]> = Vec::with_capacity(total);
    let mut x = Vec::with_capacity(total);
    for t in 0..total {
        let mut v = theta.omega;
        for i in 1..=spec.q {
            let gi = if t >= i { g[t - i] } else { start.transform };
            for c in 0..channels {
                v += theta.alpha[(i - 1) * channels + c] * gi[c];
            }
        }
        for (j, b) in theta.beta.iter().enumerate() {
            let lag = j + 1;
            v += b * if t >= lag { x[t - lag] } else { start.level };
        }
        let e = v.powf(inv_power) * innovations[t];
        if !(v.is_finite() && e.is_finite()) {
            return Err(Error::PathOverflow { t });
        }
        x.push(v);
        g.push(spec.transform(e));
        eps.push(e);
    }
    let sigma2 = x[burn_in..].iter().map(|&v| to_sigma2(spec, v)).collect();
    let presample_value = if burn_in == 0 {
        to_sigma2(spec, start.level)
    } else {
        to_sigma2(spec, x[burn_in - 1])
    };
    Ok((
        ReturnSeries::new(eps.split_off(burn_in))?,
        VolatilityPath { sigma2, presample_value },
    ))
}

/// Simulates a return path of length `innovations.len() - burn_in`.
pub fn simulate(spec: &ModelSpec, theta: &ParamVector, innovations: &[f64], burn_in: usize) -> Result<ReturnSeries> {
    simulate_path(spec, theta, innovations, burn_in).map(|(s, _)| s)
}

/// η̂_t = ε_t / σ̃_t.
pub fn residuals(series: &ReturnSeries, vol: &VolatilityPath) -> Result<Vec<f64>> {
    residuals_of(series.values(), &vol.sigma2)
}

pub(crate) fn residuals_of(obs: &[f64], sigma2: &[f64]) -> Result<Vec<f64>> {
    if obs.len() != sigma2.len() {
        return Err(Error::InvalidInput(format!(
            "series has {} observations but volatility path has {}",
            obs.len(),
            sigma2.len()
        )));
    }
    Ok(obs.iter().zip(sigma2).map(|(e, s)| e / s.sqrt()).collect())
}

/// The moment function h(x) of the family, truncated at order m.
pub fn h_eval(spec: &ModelSpec, m: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.moment_dim(m));
    h_into(spec, m, x, &mut out);
    out
}

fn h_into(spec: &ModelSpec, m: usize, x: f64, out: &mut Vec<f64>) {
    let pos = x.max(0.0);
    let neg = (-x).max(0.0);
    let mi = m as i32;
    match spec.family {
        Family::Arch | Family::Garch => out.extend((1..=mi).map(|k| x.powi(2 * k))),
        Family::TGarch => {
            out.extend((1..=mi).map(|k| pos.powi(k)));
            out.extend((1..=mi).map(|k| neg.powi(k)));
        }
        Family::GjrGarch => {
            out.extend((1..=mi).map(|k| pos.powi(2 * k)));
            out.extend((1..=mi).map(|k| neg.powi(2 * k)));
        }
        Family::ApGarch => {
            let delta = spec.delta.unwrap_or(2.0);
            out.extend((1..=m).map(|k| pos.powf(delta * k as f64)));
            out.extend((1..=m).map(|k| neg.powf(delta * k as f64)));
        }
    }
}

/// Sample means of h over the residuals: (μ₂, …, μ_{2m}) for GARCH.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub m: usize,
    pub mu: Vec<f64>,
}

impl MomentVector {
    pub fn new(m: usize, mu: Vec<f64>) -> Self {
        Self { m, mu }
    }

    /// Standard normal even moments (1, 3, 15, …) up to order 2m.
    pub fn gaussian(m: usize) -> Self {
        let mut mu = Vec::with_capacity(m);
        let mut acc = 1.0;
        for k in 1..=m {
            acc *= (2 * k - 1) as f64;
            mu.push(acc);
        }
        Self { m, mu }
    }

    /// μ_{2k}, with μ₀ = 1. Only meaningful for ARCH/GARCH layouts.
    pub fn even(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.mu[k - 1]
        }
    }
}

pub fn estimate_moments(residuals: &[f64], spec: &ModelSpec, m: usize) -> Result<MomentVector> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput("no residuals".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    let dim = spec.moment_dim(m);
    let mut acc = vec![0.0; dim];
    let mut buf = Vec::with_capacity(dim);
    for &r in residuals {
        buf.clear();
        h_into(spec, m, r, &mut buf);
        for (a, v) in acc.iter_mut().zip(&buf) {
            *a += v;
        }
    }
    let n = residuals.len() as f64;
    let mu: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("accumulating residual moments".into()));
    }
    Ok(MomentVector { m, mu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn series(v: &[f64]) -> ReturnSeries {
        ReturnSeries::new(v.to_vec()).unwrap()
    }

    #[test]
    fn arch1_hand_unrolled() {
        let spec = ModelSpec::arch(1);
        let theta = ParamVector::new(1.0, vec![0.5], vec![]);
        let eps = simulate(&spec, &theta, &[1.0, -1.0, 2.0], 0).unwrap();
        let s2 = 2f64.sqrt();
        assert_relative_eq!(eps.values()[0], s2, epsilon = 1e-15);
        assert_relative_eq!(eps.values()[1], -s2, epsilon = 1e-15);
        assert_relative_eq!(eps.values()[2], 2.0 * s2, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_recursion_is_scaled_noise() {
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(0.3, vec![0.0], vec![0.0]);
        let eta: Vec<f64> = (0..60).map(|i| ((i as f64) * 0.7).sin() * 1.3).collect();
        let eps = simulate(&spec, &theta, &eta, 10).unwrap();
        for (e, h) in eps.values().iter().zip(&eta[10..]) {
            assert_relative_eq!(*e, 0.3f64.sqrt() * h, epsilon = 1e-15);
        }
    }

    #[test]
    fn explosive_path_reports_overflow() {
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(1.0, vec![50.0], vec![5.0]);
        let eta = vec![3.0; 2000];
        assert!(matches!(simulate(&spec, &theta, &eta, 0), Err(Error::PathOverflow { .. })));
    }

    #[test]
    fn filter_with_explicit_presample_matches_hand_values() {
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(1.0, vec![0.2], vec![0.5]);
        let pre = Presample { transform: [2.0, 0.0], level: 2.0 };
        let vol = filter_with_presample(&spec, &theta, &series(&[2.0, 0.0]), &pre).unwrap();
        assert_relative_eq!(vol.sigma2[0], 2.4, epsilon = 1e-15);
        assert_relative_eq!(vol.sigma2[1], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn filter_default_presample_is_steady_state() {
        // ε̃₀² = (4 + 0)/2 = 2, σ̃₀² = (1 + 0.2·2)/(1 − 0.5) = 2.8
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(1.0, vec![0.2], vec![0.5]);
        let vol = filter_volatility(&spec, &theta, &series(&[2.0, 0.0])).unwrap();
        assert_relative_eq!(vol.presample_value, 2.8, epsilon = 1e-15);
        assert_relative_eq!(vol.sigma2[0], 2.8, epsilon = 1e-15);
        assert_relative_eq!(vol.sigma2[1], 1.0 + 0.8 + 0.5 * 2.8, epsilon = 1e-15);
    }

    #[test]
    fn no_feedback_gives_constant_volatility() {
        let spec = ModelSpec::garch(2, 2);
        let theta = ParamVector::new(0.7, vec![0.0, 0.0], vec![0.0, 0.0]);
        let vol = filter_volatility(&spec, &theta, &series(&[1.0, -5.0, 3.0, 0.1])).unwrap();
        assert!(vol.sigma2.iter().all(|&s| s == 0.7));
    }

    #[test]
    fn filter_rejects_bad_parameters() {
        let spec = ModelSpec::garch(1, 1);
        let bad = ParamVector::new(-1.0, vec![0.1], vec![0.8]);
        assert!(matches!(
            filter_volatility(&spec, &bad, &series(&[1.0])),
            Err(Error::ParameterDomain(_))
        ));
        let neg_alpha = ParamVector::new(1.0, vec![-0.1], vec![0.8]);
        assert!(filter_volatility(&spec, &neg_alpha, &series(&[1.0])).is_err());
    }

    #[test]
    fn scale_params_examples() {
        let spec = ModelSpec::garch(1, 1);
        let theta = ParamVector::new(1.0, vec![0.1], vec![0.8]);
        assert_eq!(scale_params(&spec, &theta, 1.0).unwrap(), theta);
        let scaled = scale_params(&spec, &theta, 2.0).unwrap();
        assert_relative_eq!(scaled.omega, 4.0);
        assert_relative_eq!(scaled.alpha[0], 0.4);
        assert_relative_eq!(scaled.beta[0], 0.8);
        assert!(scale_params(&spec, &theta, 0.0).is_err());
    }

    #[test]
    fn scaling_stability_with_fixed_observations() {
        let spec = ModelSpec::garch(1, 2);
        let theta = ParamVector::new(0.08, vec![0.05, 0.1], vec![0.8]);
        let obs = series(&[0.3, -1.2, 2.2, 0.05, -0.7, 1.9, -3.1, 0.4]);
        let base = filter_volatility(&spec, &theta, &obs).unwrap();
        let scaled = filter_volatility(&spec, &scale_params(&spec, &theta, 2.0).unwrap(), &obs).unwrap();
        for (a, b) in base.sigma2.iter().zip(&scaled.sigma2) {
            assert_relative_eq!(4.0 * a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn residual_examples() {
        let vol = VolatilityPath { sigma2: vec![4.0, 9.0], presample_value: 1.0 };
        assert_eq!(residuals(&series(&[2.0, -3.0]), &vol).unwrap(), vec![1.0, -1.0]);
        let vol = VolatilityPath { sigma2: vec![4.0], presample_value: 1.0 };
        assert!(residuals(&series(&[2.0, -3.0]), &vol).is_err());
    }

    #[test]
    fn h_examples() {
        assert_eq!(h_eval(&ModelSpec::garch(1, 1), 3, 2.0), vec![4.0, 16.0, 64.0]);
        assert_eq!(h_eval(&ModelSpec::tgarch(1, 1), 2, -3.0), vec![0.0, 0.0, 3.0, 9.0]);
        assert!(h_eval(&ModelSpec::garch(1, 1), 4, 0.0).iter().all(|&v| v == 0.0));
        assert_eq!(h_eval(&ModelSpec::gjrgarch(1, 1), 2, 2.0), vec![4.0, 16.0, 0.0, 0.0]);
        let ap = ModelSpec::apgarch(1, 1, 1.5, 0.2);
        let h = h_eval(&ap, 2, -4.0);
        assert_eq!(h[0], 0.0);
        assert_relative_eq!(h[2], 8.0, epsilon = 1e-12);
        assert_relative_eq!(h[3], 64.0, epsilon = 1e-12);
    }

    #[test]
    fn moment_examples() {
        let spec = ModelSpec::garch(1, 1);
        assert_eq!(estimate_moments(&[1.0; 5], &spec, 2).unwrap().mu, vec![1.0, 1.0]);
        let mu = estimate_moments(&[1.0, -1.0, 2.0, -2.0], &spec, 2).unwrap();
        assert_eq!(mu.mu, vec![2.5, 8.5]);
        assert!(estimate_moments(&[], &spec, 2).is_err());
        assert!(estimate_moments(&[1e200], &spec, 3).is_err());
    }

    #[test]
    fn estimate_moments_matches_power_means() {
        let spec = ModelSpec::garch(1, 1);
        let r: Vec<f64> = (0..97).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let mu = estimate_moments(&r, &spec, 4).unwrap();
        for k in 1..=4 {
            let direct = r.iter().map(|x| x.powi(2 * k as i32)).sum::<f64>() / r.len() as f64;
            assert_eq!(mu.mu[k - 1], direct);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::garch(0, 1).validate().is_err());
        assert!(ModelSpec::garch(1, 0).validate().is_err());
        assert!(ModelSpec::apgarch(1, 1, 1.0, 1.5).validate().is_err());
        assert!(ModelSpec::new(Family::Garch, 1, 1, Some(2.0), None).is_err());
        assert_eq!(ModelSpec::tgarch(1, 2).n_params(), 6);
        assert_eq!("GJR-GARCH".parse::<Family>().unwrap(), Family::GjrGarch);
    }

    #[test]
    fn gaussian_moments() {
        assert_eq!(MomentVector::gaussian(5).mu, vec![1.0, 3.0, 15.0, 105.0, 945.0]);
    }
}
