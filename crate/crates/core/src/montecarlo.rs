//! Monte Carlo size/power experiments for the moment test: boundary
//! calibration of β, rejection-frequency tables and density samples of the
//! centred statistics.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_tests, BootstrapConfig, MomentTestResult};
use crate::error::{Error, Result};
use crate::model::{simulate, ModelSpec, MomentVector, ParamVector, ReturnSeries, DEFAULT_BURN_IN};
use crate::parallel::{map_indexed, Execution};
use crate::qml::{Direction, OptimOptions};
use crate::spectral::{tau, SpectralMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InnovationFamily {
    Gaussian,
    /// Student-t with `df` degrees of freedom scaled to unit variance.
    #[serde(rename = "student")]
    StudentT { df: f64 },
}

impl InnovationFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            InnovationFamily::Gaussian => Ok(()),
            InnovationFamily::StudentT { df } if *df > 2.0 => Ok(()),
            InnovationFamily::StudentT { df } => {
                Err(Error::InvalidInput(format!("Student-t needs df > 2 for unit variance, got {df}")))
            }
        }
    }

    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match *self {
            InnovationFamily::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            InnovationFamily::StudentT { df } => {
                let dist = StudentT::new(df).map_err(|e| Error::InvalidInput(e.to_string()))?;
                let scale = ((df - 2.0) / df).sqrt();
                (0..n).map(|_| dist.sample(rng) * scale).collect()
            }
        })
    }

    /// Population even moments (μ₂, …, μ_{2m}).
    pub fn moments(&self, m: usize) -> Result<MomentVector> {
        match *self {
            InnovationFamily::Gaussian => Ok(MomentVector::gaussian(m)),
            InnovationFamily::StudentT { df } => {
                self.validate()?;
                if df <= 2.0 * m as f64 {
                    return Err(Error::InvalidInput(format!("E[η^{}] is infinite for df = {df}", 2 * m)));
                }
                // E[η^{2k}] = (df−2)^k Π_{i≤k} (2i−1)/(df−2i)
                let mut mu = Vec::with_capacity(m);
                let mut acc = 1.0;
                for k in 1..=m {
                    acc *= (df - 2.0) * (2 * k - 1) as f64 / (df - 2.0 * k as f64);
                    mu.push(acc);
                }
                Ok(MomentVector::new(m, mu))
            }
        }
    }
}

/// β₁ such that τ(θ, μ) = 1 at `m_target`, for a spec with one β lag.
pub fn solve_boundary_beta(
    spec: &ModelSpec,
    theta_partial: &ParamVector,
    mu: &MomentVector,
    m_target: usize,
    tol: f64,
    mode: SpectralMode,
) -> Result<f64> {
    if spec.p != 1 {
        return Err(Error::Unsupported(format!("boundary calibration with p = {}", spec.p)));
    }
    let at = |beta: f64| -> Result<f64> {
        let theta = ParamVector::new(theta_partial.omega, theta_partial.alpha.clone(), vec![beta]);
        tau(spec, &theta, mu, m_target, mode)
    };
    let (t0, t1) = (at(0.0)?, at(1.0)?);
    if (t1 - 1.0).abs() < tol {
        return Ok(1.0);
    }
    if t0 > 1.0 || t1 < 1.0 {
        return Err(Error::InvalidInput(format!(
            "τ does not cross one on β ∈ [0, 1] (τ(0) = {t0:.6}, τ(1) = {t1:.6})"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut mid = 0.5;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let t = at(mid)?;
        if (t - 1.0).abs() < tol || hi - lo < 1e-15 {
            break;
        }
        if t > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(mid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: ModelSpec,
    /// True parameters; with `calibrate_m` set, β₁ is replaced by the
    /// boundary value for that m.
    pub theta: ParamVector,
    pub calibrate_m: Option<usize>,
    pub m_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub s: usize,
    pub b: usize,
    pub nominal_levels: Vec<f64>,
    pub master_seed: u64,
    pub innovation: InnovationFamily,
    pub burn_in: usize,
    pub mode: SpectralMode,
    pub direction: Direction,
    pub execution: Execution,
    pub optim: OptimOptions,
}

impl ExperimentConfig {
    /// The GARCH(1,2) boundary design with ω = 0.08, α = (0.05, 0.10) and β₁
    /// set so that τ = 1 at m = 3 under Gaussian innovations.
    pub fn boundary_design() -> Self {
        Self {
            spec: ModelSpec::garch(1, 2),
            theta: ParamVector::new(0.08, vec![0.05, 0.10], vec![0.80]),
            calibrate_m: Some(3),
            m_grid: vec![1, 2, 3, 4, 5],
            n_grid: vec![1000],
            s: 200,
            b: 199,
            nominal_levels: vec![0.05, 0.10],
            master_seed: 20_240_601,
            innovation: InnovationFamily::Gaussian,
            burn_in: DEFAULT_BURN_IN,
            mode: SpectralMode::Radius,
            direction: Direction::UpperTail,
            execution: Execution::default(),
            optim: OptimOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.theta.validate(&self.spec)?;
        self.innovation.validate()?;
        if self.s == 0 || self.b == 0 {
            return Err(Error::InvalidInput("S and B must be at least 1".into()));
        }
        if self.m_grid.is_empty() || self.m_grid.contains(&0) {
            return Err(Error::InvalidInput("m grid must hold positive integers".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.iter().any(|n| *n <= self.spec.n_params()) {
            return Err(Error::InvalidInput("every n must exceed the number of parameters".into()));
        }
        if self.nominal_levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::InvalidInput("nominal levels must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// θ₀ with the calibrated β when requested.
    pub fn true_theta(&self) -> Result<ParamVector> {
        let Some(m) = self.calibrate_m else { return Ok(self.theta.clone()) };
        let mu = self.innovation.moments(m)?;
        let beta = solve_boundary_beta(&self.spec, &self.theta, &mu, m, 1e-10, self.mode)?;
        Ok(ParamVector::new(self.theta.omega, self.theta.alpha.clone(), vec![beta]))
    }

    /// Population T = τ(θ₀, μ) at m.
    pub fn population_tau(&self, m: usize) -> Result<f64> {
        tau(&self.spec, &self.true_theta()?, &self.innovation.moments(m)?, m, self.mode)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Seed of simulation `sim` in the cell with sample size `n`.
pub fn simulation_seed(master: u64, n: usize, sim: usize) -> u64 {
    mix(mix(master, n as u64), sim as u64)
}

/// The simulated return series of simulation `sim` at sample size `n`.
pub fn simulate_dataset(cfg: &ExperimentConfig, theta: &ParamVector, n: usize, sim: usize) -> Result<ReturnSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(simulation_seed(cfg.master_seed, n, sim));
    let eta = cfg.innovation.draw(n + cfg.burn_in, &mut rng)?;
    simulate(&cfg.spec, theta, &eta, cfg.burn_in)
}

/// Seed of the bootstrap streams of one simulation.
pub fn bootstrap_seed(master: u64, n: usize, sim: usize) -> u64 {
    mix(simulation_seed(master, n, sim), 0xb007_57a9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub n: usize,
    pub sim: usize,
    pub m: usize,
    pub t_hat: f64,
    pub t_hat_c: f64,
    pub p_value: f64,
    pub b_effective: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCell {
    pub n: usize,
    pub m: usize,
    pub level: f64,
    pub rejections: usize,
    pub s_effective: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RejectionTable {
    pub cells: Vec<RejectionCell>,
}

impl RejectionTable {
    pub fn get(&self, n: usize, m: usize, level: f64) -> Option<&RejectionCell> {
        self.cells.iter().find(|c| c.n == n && c.m == m && c.level == level)
    }
}

/// √n(T̂ − 1) across simulations and √n(T̂* − T̂ᶜ) from one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySample {
    pub n: usize,
    pub m: usize,
    pub population_tau: f64,
    pub statistic: Vec<f64>,
    pub bootstrap: Vec<f64>,
    pub designated_simulation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub theta: ParamVector,
    pub table: RejectionTable,
    pub records: Vec<SimulationRecord>,
    pub densities: Vec<DensitySample>,
    pub failed_simulations: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let theta = cfg.true_theta()?;
    let boot = |seed| BootstrapConfig {
        b: cfg.b,
        seed,
        direction: cfg.direction,
        resample_standardize: false,
        mode: cfg.mode,
        execution: cfg.execution,
    };
    let mut table = RejectionTable::default();
    let mut records = Vec::new();
    let mut densities = Vec::new();
    let mut failed = 0;
    for &n in &cfg.n_grid {
        let runs: Vec<Option<Vec<MomentTestResult>>> = map_indexed(cfg.execution, cfg.s, |sim| {
            let outcome = simulate_dataset(cfg, &theta, n, sim).and_then(|series| {
                bootstrap_tests(&cfg.spec, &series, &cfg.m_grid, &boot(bootstrap_seed(cfg.master_seed, n, sim)), &cfg.optim)
            });
            match outcome {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("simulation {sim} at n = {n} failed: {e}");
                    None
                }
            }
        });
        let failures = runs.iter().filter(|r| r.is_none()).count();
        failed += failures;
        if failures * 100 > cfg.s {
            log::warn!("{failures} of {} simulations failed at n = {n}", cfg.s);
        }
        let sqrt_n = (n as f64).sqrt();
        let designated = runs.iter().position(|r| r.is_some());
        for (k, &m) in cfg.m_grid.iter().enumerate() {
            let results: Vec<(usize, &MomentTestResult)> =
                runs.iter().enumerate().filter_map(|(sim, r)| r.as_ref().map(|v| (sim, &v[k]))).collect();
            let s_effective = results.len();
            for &level in &cfg.nominal_levels {
                let rejections = results.iter().filter(|(_, r)| r.rejects(level)).count();
                table.cells.push(RejectionCell {
                    n,
                    m,
                    level,
                    rejections,
                    s_effective,
                    frequency: if s_effective > 0 { rejections as f64 / s_effective as f64 } else { f64::NAN },
                });
            }
            records.extend(results.iter().map(|(sim, r)| SimulationRecord {
                n,
                m,
                sim: *sim,
                t_hat: r.t_hat,
                t_hat_c: r.t_hat_c,
                p_value: r.p_value,
                b_effective: r.b_effective,
            }));
            if let Some(d) = designated {
                densities.push(DensitySample {
                    n,
                    m,
                    population_tau: cfg.population_tau(m).unwrap_or(f64::NAN),
                    statistic: results.iter().map(|(_, r)| sqrt_n * (r.t_hat - 1.0)).collect(),
                    bootstrap: runs[d].as_ref().expect("designated run succeeded")[k]
                        .bootstrap_stats
                        .iter()
                        .map(|s| sqrt_n * s)
                        .collect(),
                    designated_simulation: d,
                });
            }
        }
    }
    Ok(ExperimentOutput { theta, table, records, densities, failed_simulations: failed })
}

/// Writes the two density samples of cell (n, m) into `dir`, one number per
/// line, plus a `.meta` file naming the designated simulation.
pub fn export_density_samples(output: &ExperimentOutput, n: usize, m: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let sample = output
        .densities
        .iter()
        .find(|d| d.n == n && d.m == m)
        .ok_or_else(|| Error::InvalidInput(format!("no density sample for cell n = {n}, m = {m}")))?;
    std::fs::create_dir_all(dir)?;
    let stat_path = dir.join(format!("density_n{n}_m{m}_statistic.txt"));
    let boot_path = dir.join(format!("density_n{n}_m{m}_bootstrap.txt"));
    crate::io::write_column(&stat_path, &sample.statistic)?;
    crate::io::write_column(&boot_path, &sample.bootstrap)?;
    let meta = format!(
        "n = {n}\nm = {m}\npopulation_tau = {}\ncentre = {}\ndesignated_simulation = {}\nstatistic = \"sqrt(n) * (T_hat - 1)\"\nbootstrap = \"sqrt(n) * (T_star - T_hat_c)\"\n",
        sample.population_tau,
        (n as f64).sqrt() * (sample.population_tau - 1.0),
        sample.designated_simulation
    );
    std::fs::write(dir.join(format!("density_n{n}_m{m}.meta")), meta)?;
    Ok((stat_path, boot_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_boundary_cases() {
        let spec = ModelSpec::garch(1, 1);
        let mu = MomentVector::gaussian(2);
        let zero = ParamVector::new(1.0, vec![0.0], vec![0.0]);
        assert_eq!(solve_boundary_beta(&spec, &zero, &mu, 1, 1e-10, SpectralMode::Radius).unwrap(), 1.0);
        let a = ParamVector::new(1.0, vec![0.1], vec![0.0]);
        let beta = solve_boundary_beta(&spec, &a, &mu, 1, 1e-10, SpectralMode::Radius).unwrap();
        assert_relative_eq!(beta, 0.9, epsilon = 1e-9);
    }

    #[test]
    fn quadratic_boundary_case() {
        // β² + 0.2β + 0.03 = 1
        let spec = ModelSpec::garch(1, 1);
        let a = ParamVector::new(1.0, vec![0.1], vec![0.0]);
        let beta = solve_boundary_beta(&spec, &a, &MomentVector::gaussian(2), 2, 1e-12, SpectralMode::Radius).unwrap();
        assert_relative_eq!(beta, (-0.2 + (0.04f64 + 3.88).sqrt()) / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn no_crossing_is_an_error() {
        let spec = ModelSpec::garch(1, 1);
        let a = ParamVector::new(1.0, vec![1.5], vec![0.0]);
        assert!(solve_boundary_beta(&spec, &a, &MomentVector::gaussian(1), 1, 1e-10, SpectralMode::Radius).is_err());
    }

    #[test]
    fn student_moments_are_normalized() {
        let mu = InnovationFamily::StudentT { df: 9.0 }.moments(2).unwrap();
        assert_relative_eq!(mu.mu[0], 1.0, epsilon = 1e-15);
        // kurtosis 3 + 6/(df − 4)
        assert_relative_eq!(mu.mu[1], 3.0 + 6.0 / 5.0, epsilon = 1e-12);
        assert!(InnovationFamily::StudentT { df: 3.0 }.moments(2).is_err());
    }

    #[test]
    fn seeds_are_keyed_by_cell_and_simulation() {
        assert_eq!(simulation_seed(1, 1000, 4), simulation_seed(1, 1000, 4));
        assert_ne!(simulation_seed(1, 1000, 4), simulation_seed(1, 1000, 5));
        assert_ne!(simulation_seed(1, 1000, 4), simulation_seed(1, 2000, 4));
    }

    #[test]
    fn tiny_experiment_is_deterministic() {
        let cfg = ExperimentConfig {
            m_grid: vec![1, 3],
            n_grid: vec![300],
            s: 4,
            b: 9,
            ..ExperimentConfig::boundary_design()
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&ExperimentConfig { execution: Execution::Sequential, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        for cell in &a.table.cells {
            assert!((0.0..=1.0).contains(&cell.frequency));
        }
        let five = a.table.get(300, 3, 0.05).unwrap().rejections;
        let ten = a.table.get(300, 3, 0.10).unwrap().rejections;
        assert!(five <= ten);
        // dropping m = 1 from the grid leaves the m = 3 results unchanged
        let only3 = run_experiment(&ExperimentConfig { m_grid: vec![3], ..cfg }).unwrap();
        let pick = |o: &ExperimentOutput| o.records.iter().filter(|r| r.m == 3).cloned().collect::<Vec<_>>();
        assert_eq!(pick(&a), pick(&only3));
        let dir = tempfile::tempdir().unwrap();
        let (s, bpath) = export_density_samples(&a, 300, 3, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(s).unwrap().lines().count(), 4);
        assert!(std::fs::read_to_string(bpath).unwrap().lines().count() <= 9);
        assert!(export_density_samples(&a, 300, 2, dir.path()).is_err());
    }
}
