//! Data plumbing: CSV ingestion of prices or returns, run reports, the
//! Monte Carlo configuration file and plain-text/CSV outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, ParamVector, ReturnSeries, DEFAULT_BURN_IN};
use crate::montecarlo::{ExperimentConfig, ExperimentOutput, InnovationFamily, RejectionTable};
use crate::parallel::Execution;
use crate::qml::{Direction, OptimOptions};
use crate::spectral::SpectralMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Prices,
    Returns,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prices" | "price" => Ok(DataKind::Prices),
            "returns" | "return" => Ok(DataKind::Returns),
            other => Err(Error::InvalidInput(format!("unknown data kind '{other}' (prices|returns)"))),
        }
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::Prices => "prices",
            DataKind::Returns => "returns",
        })
    }
}

/// Column choice: a header name, a zero-based index, or `Auto` (Adj Close,
/// then Close, then the last column).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ColumnSelector {
    #[default]
    Auto,
    Name(String),
    Index(usize),
}

impl std::str::FromStr for ColumnSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("auto") {
            Ok(ColumnSelector::Auto)
        } else if let Ok(i) = s.parse::<usize>() {
            Ok(ColumnSelector::Index(i))
        } else {
            Ok(ColumnSelector::Name(s.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputDataset {
    pub source_path: PathBuf,
    pub kind: DataKind,
    /// Header name of the chosen column, or its index when there is no header.
    pub column: String,
    pub series: ReturnSeries,
}

/// 100 · (log p_t − log p_{t−1}).
pub fn returns_from_prices(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 prices, got {}", prices.len())));
    }
    if let Some(i) = prices.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidInput(format!("price {} at row {} is not positive", prices[i], i + 1)));
    }
    Ok(prices.windows(2).map(|w| 100.0 * (w[1].ln() - w[0].ln())).collect())
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn ingest(path: &Path, kind: DataKind, column: &ColumnSelector) -> Result<InputDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Io(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        rows.push((i + 1, rec));
    }
    let Some((_, first)) = rows.first() else {
        return Err(Error::InvalidInput(format!("{} holds no data", path.display())));
    };
    // a header row is one whose cells are not all numeric
    let header: Option<Vec<String>> = if first.iter().any(|c| parse_cell(c).is_none()) {
        Some(first.iter().map(|c| c.to_string()).collect())
    } else {
        None
    };
    let width = first.len();
    let (index, name) = match (column, &header) {
        (ColumnSelector::Index(i), h) => {
            if *i >= width {
                return Err(Error::InvalidInput(format!("column {i} out of range ({width} columns)")));
            }
            (*i, h.as_ref().map(|h| h[*i].clone()).unwrap_or_else(|| i.to_string()))
        }
        (ColumnSelector::Name(n), Some(h)) => match h.iter().position(|c| c == n) {
            Some(i) => (i, n.clone()),
            None => return Err(Error::InvalidInput(format!("no column named '{n}' (have: {})", h.join(", ")))),
        },
        (ColumnSelector::Name(n), None) => {
            return Err(Error::InvalidInput(format!("column '{n}' requested but the file has no header row")))
        }
        (ColumnSelector::Auto, Some(h)) => {
            let pick = ["Adj Close", "Close"]
                .iter()
                .find_map(|want| h.iter().position(|c| c.eq_ignore_ascii_case(want)))
                .unwrap_or(width - 1);
            (pick, h[pick].clone())
        }
        (ColumnSelector::Auto, None) => (width - 1, (width - 1).to_string()),
    };
    let body = if header.is_some() { &rows[1..] } else { &rows[..] };
    let mut values = Vec::with_capacity(body.len());
    for (line, rec) in body {
        let cell = rec.get(index).unwrap_or("");
        let v = parse_cell(cell)
            .ok_or_else(|| Error::InvalidInput(format!("row {line}: non-numeric value '{cell}' in column '{name}'")))?;
        values.push(v);
    }
    let values = match kind {
        DataKind::Prices => returns_from_prices(&values)?,
        DataKind::Returns => values,
    };
    Ok(InputDataset {
        source_path: path.to_path_buf(),
        kind,
        column: name,
        series: ReturnSeries::new(values)?,
    })
}

/// One number per line.
pub fn write_column(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 20);
    for v in values {
        writeln!(out, "{v}").expect("writing to a string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A single-column CSV with header `return`.
pub fn write_series_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("return\n");
    for v in values {
        writeln!(out, "{v}").expect("writing to a string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Columns n, m, level, frequency, S_effective.
pub fn write_rejection_csv(path: &Path, table: &RejectionTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["n", "m", "level", "frequency", "S_effective"]).map_err(csv_err)?;
    for c in &table.cells {
        w.write_record([
            c.n.to_string(),
            c.m.to_string(),
            c.level.to_string(),
            c.frequency.to_string(),
            c.s_effective.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-simulation (T̂, T̂ᶜ, p̂) records.
pub fn write_records_csv(path: &Path, output: &ExperimentOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in &output.records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub family: Family,
    pub p: usize,
    pub q: usize,
    pub m: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    pub levels: Vec<f64>,
    pub mode: SpectralMode,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DataKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub moment_names: Vec<String>,
    /// Residual moments (μ̂₂, μ̂₄, … for ARCH/GARCH).
    pub residual_moments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub b: usize,
    pub b_effective: usize,
    pub bootstrap: Vec<f64>,
    pub bootstrap_moments: Vec<f64>,
    /// √(Σ̂ᵢᵢ/n) from the plug-in covariance blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asymptotic: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asymptotic_moments: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub level: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub m: usize,
    pub t_hat: f64,
    pub t_hat_c: f64,
    pub p_value: f64,
    pub b_effective: usize,
    pub failures: usize,
    pub decisions: Vec<LevelDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_seconds: Option<f64>,
    pub config: ReportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<StandardErrors>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestSummary>,
}

impl RunReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(format!("serialising report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Io(format!("parsing report: {e}")))
    }

    /// Human-readable tables: estimates with standard errors, then the
    /// moment tests.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        writeln!(out, "{}({},{}) on n = {}", c.family.name().to_uppercase(), c.p, c.q, c.n).ok();
        if let Some(fit) = &self.fit {
            writeln!(out).ok();
            let with_se = self.standard_errors.is_some();
            if with_se {
                writeln!(out, "{:<10} {:>12} {:>12} {:>12}", "", "estimate", "boot. s.e.", "asym. s.e.").ok();
            } else {
                writeln!(out, "{:<10} {:>12}", "", "estimate").ok();
            }
            for (i, (name, est)) in fit.names.iter().zip(&fit.estimates).enumerate() {
                let se = self.standard_errors.as_ref();
                let boot = se.and_then(|s| s.bootstrap.get(i)).map(|v| format!("{v:.4}")).unwrap_or_default();
                let asym = se
                    .and_then(|s| s.asymptotic.as_ref())
                    .and_then(|a| a.get(i))
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_default();
                let line = format!("{name:<10} {est:>12.4} {boot:>12} {asym:>12}");
                writeln!(out, "{}", if with_se { line.as_str() } else { line.trim_end() }).ok();
            }
            for (k, (name, mu)) in fit.moment_names.iter().zip(&fit.residual_moments).enumerate() {
                let se = self.standard_errors.as_ref();
                let boot = se.and_then(|s| s.bootstrap_moments.get(k)).map(|v| format!("{v:.4}")).unwrap_or_default();
                let asym = se
                    .and_then(|s| s.asymptotic_moments.as_ref())
                    .and_then(|a| a.get(k))
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_default();
                let line = format!("{name:<10} {mu:>12.4} {boot:>12} {asym:>12}");
                writeln!(out, "{}", if with_se { line.as_str() } else { line.trim_end() }).ok();
            }
            writeln!(out, "log-lik/n  {:>12.6}   converged: {}", fit.loglik, fit.converged).ok();
        }
        if !self.tests.is_empty() {
            writeln!(out).ok();
            let levels: Vec<String> = c.levels.iter().map(|l| format!("rej@{l}")).collect();
            writeln!(out, "{:>3} {:>10} {:>10} {:>8} {:>6}  {}", "m", "T_hat", "T_hat_c", "p_value", "B_eff", levels.join(" ")).ok();
            for t in &self.tests {
                let marks: Vec<String> = t
                    .decisions
                    .iter()
                    .map(|d| format!("{:>w$}", if d.reject { "yes" } else { "no" }, w = format!("rej@{}", d.level).len()))
                    .collect();
                writeln!(
                    out,
                    "{:>3} {:>10.4} {:>10.4} {:>8.4} {:>6}  {}",
                    t.m,
                    t.t_hat,
                    t.t_hat_c,
                    t.p_value,
                    t.b_effective,
                    marks.join(" ")
                )
                .ok();
            }
        }
        out
    }
}

/// Parameter labels (omega, alpha1…, beta1…).
pub fn parameter_names(spec: &ModelSpec) -> Vec<String> {
    let mut names = vec!["omega".to_string()];
    if spec.family.is_threshold() {
        for i in 1..=spec.q {
            names.push(format!("alpha{i}+"));
            names.push(format!("alpha{i}-"));
        }
    } else {
        names.extend((1..=spec.q).map(|i| format!("alpha{i}")));
    }
    names.extend((1..=spec.p).map(|j| format!("beta{j}")));
    names
}

/// Labels of the moment vector of order `m`: mu_2, mu_4, … for ARCH/GARCH,
/// then the positive- and negative-part moments for the other families.
pub fn moment_names(spec: &ModelSpec, m: usize) -> Vec<String> {
    match spec.family {
        Family::Arch | Family::Garch => (1..=m).map(|k| format!("mu_{}", 2 * k)).collect(),
        _ => (1..=m).map(|k| format!("mu+_{k}")).chain((1..=m).map(|k| format!("mu-_{k}"))).collect(),
    }
}

/// Monte Carlo configuration file (TOML, one `key = value` per line).
/// Missing keys fall back to the GARCH(1,2) boundary design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McFile {
    #[serde(default = "McFile::default_family")]
    pub family: Family,
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    /// Set β₁ so that τ = 1 at this m; `0` disables calibration.
    #[serde(default)]
    pub calibrate_m: Option<usize>,
    #[serde(default)]
    pub m: Option<Vec<usize>>,
    #[serde(default)]
    pub n: Option<Vec<usize>>,
    #[serde(default, rename = "S")]
    pub s: Option<usize>,
    #[serde(default, rename = "B")]
    pub b: Option<usize>,
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub innovation: Option<String>,
    #[serde(default)]
    pub df: Option<f64>,
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default)]
    pub mode: Option<SpectralMode>,
    #[serde(default)]
    pub direction: Option<Direction>,
}

impl McFile {
    fn default_family() -> Family {
        Family::Garch
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn into_config(self, execution: Execution) -> Result<ExperimentConfig> {
        let base = ExperimentConfig::boundary_design();
        let p = self.p.unwrap_or(base.spec.p);
        let q = self.q.unwrap_or(base.spec.q);
        let spec = ModelSpec::new(self.family, p, q, None, None)?;
        let same_shape = spec == base.spec;
        let alpha = match self.alpha {
            Some(a) => a,
            None if same_shape => base.theta.alpha.clone(),
            None => return Err(Error::InvalidInput("alpha must be given for a non-default model".into())),
        };
        let beta_given = self.beta.is_some();
        let beta = match self.beta {
            Some(b) => b,
            None if same_shape || p == 1 => vec![0.0; p],
            None => return Err(Error::InvalidInput("beta must be given when p > 1".into())),
        };
        let calibrate_m = match self.calibrate_m {
            Some(0) => None,
            Some(m) => Some(m),
            None if !beta_given && p == 1 => base.calibrate_m,
            None => None,
        };
        let innovation = match self.innovation.as_deref().unwrap_or("gaussian") {
            "gaussian" | "normal" => InnovationFamily::Gaussian,
            "student" | "t" => InnovationFamily::StudentT { df: self.df.unwrap_or(9.0) },
            other => return Err(Error::InvalidInput(format!("unknown innovation '{other}'"))),
        };
        let cfg = ExperimentConfig {
            spec,
            theta: ParamVector::new(self.omega.unwrap_or(base.theta.omega), alpha, beta),
            calibrate_m,
            m_grid: self.m.unwrap_or(base.m_grid),
            n_grid: self.n.unwrap_or(base.n_grid),
            s: self.s.unwrap_or(base.s),
            b: self.b.unwrap_or(base.b),
            nominal_levels: self.levels.unwrap_or(base.nominal_levels),
            master_seed: self.seed.unwrap_or(base.master_seed),
            innovation,
            burn_in: self.burn_in.unwrap_or(DEFAULT_BURN_IN),
            mode: self.mode.unwrap_or_default(),
            direction: self.direction.unwrap_or_default(),
            execution,
            optim: OptimOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_prices_give_one_return() {
        let f = file("Date,Close\n2020-01-01,100\n2020-01-02,101\n");
        let d = ingest(f.path(), DataKind::Prices, &ColumnSelector::Auto).unwrap();
        assert_eq!(d.series.len(), 1);
        assert_relative_eq!(d.series.values()[0], 0.995_033_085_3, epsilon = 1e-9);
        assert_eq!(d.column, "Close");
    }

    #[test]
    fn returns_pass_through_and_constant_prices() {
        let f = file("0.5\n-1.25\n2\n");
        let d = ingest(f.path(), DataKind::Returns, &ColumnSelector::Auto).unwrap();
        assert_eq!(d.series.values(), &[0.5, -1.25, 2.0]);
        let g = file("p\n7\n7\n7\n");
        let d = ingest(g.path(), DataKind::Prices, &ColumnSelector::Auto).unwrap();
        assert!(d.series.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn column_selection_and_errors() {
        let f = file("Date,Open,Adj Close,Volume\nd1,1,10,5\nd2,2,11,6\nd3,3,oops,7\n");
        let err = ingest(f.path(), DataKind::Prices, &ColumnSelector::Auto).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");
        let d = ingest(f.path(), DataKind::Returns, &"Open".parse().unwrap()).unwrap();
        assert_eq!(d.series.values(), &[1.0, 2.0, 3.0]);
        let d = ingest(f.path(), DataKind::Returns, &ColumnSelector::Index(3)).unwrap();
        assert_eq!(d.series.values(), &[5.0, 6.0, 7.0]);
        assert!(ingest(f.path(), DataKind::Returns, &"Nope".parse().unwrap()).is_err());
        let one = file("100\n");
        assert!(ingest(one.path(), DataKind::Prices, &ColumnSelector::Auto).is_err());
    }

    #[test]
    fn cumulated_returns_recover_prices() {
        let prices = [100.0, 101.5, 99.25, 99.25, 120.0, 87.5];
        let r = returns_from_prices(&prices).unwrap();
        let mut level = prices[0];
        for (k, ret) in r.iter().enumerate() {
            level *= (ret / 100.0).exp();
            assert_relative_eq!(level, prices[k + 1], max_relative = 1e-12);
        }
    }

    #[test]
    fn report_round_trip() {
        let report = RunReport {
            command: "test".into(),
            version: "0.1.0".into(),
            seed: Some(7),
            timing_seconds: None,
            config: ReportConfig {
                family: Family::Garch,
                p: 1,
                q: 2,
                m: vec![1, 2],
                b: Some(99),
                levels: vec![0.05, 0.1],
                mode: SpectralMode::Radius,
                direction: Direction::UpperTail,
                data: Some("x.csv".into()),
                kind: Some(DataKind::Prices),
                column: None,
                n: 10,
            },
            fit: Some(FitSummary {
                names: vec!["omega".into(), "alpha1".into()],
                estimates: vec![0.1 + 0.2, 1.0 / 3.0],
                loglik: -1.234_567_890_123,
                converged: true,
                iterations: 12,
                gradient_norm: 3.2e-11,
                moment_names: vec!["mu_2".into(), "mu_4".into()],
                residual_moments: vec![1.0, 3.1],
            }),
            standard_errors: None,
            tests: vec![TestSummary {
                m: 1,
                t_hat: 0.97,
                t_hat_c: 0.97,
                p_value: 1.0,
                b_effective: 99,
                failures: 0,
                decisions: vec![LevelDecision { level: 0.05, reject: false }],
            }],
        };
        let text = report.to_toml().unwrap();
        assert_eq!(RunReport::from_toml(&text).unwrap(), report);
        assert!(report.to_table().contains("T_hat"));
    }

    #[test]
    fn mc_file_defaults_to_boundary_design() {
        let cfg = McFile::parse("S = 3\nB = 9\nn = [250]\nm = [1, 3]\n").unwrap().into_config(Execution::Sequential).unwrap();
        assert_eq!(cfg.spec, ModelSpec::garch(1, 2));
        assert_eq!(cfg.calibrate_m, Some(3));
        assert_eq!((cfg.s, cfg.b), (3, 9));
        assert!(McFile::parse("bogus = 1").is_err());
        let t = McFile::parse("innovation = \"student\"\ndf = 7\n").unwrap().into_config(Execution::Sequential).unwrap();
        assert_eq!(t.innovation, InnovationFamily::StudentT { df: 7.0 });
    }
}
