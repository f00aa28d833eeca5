use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use garchmoments::bootstrap::{bootstrap_joint, bootstrap_test_from_fit, BootstrapConfig};
use garchmoments::io::{
    ingest, moment_names, parameter_names, write_records_csv, write_rejection_csv, write_series_csv, ColumnSelector,
    DataKind, FitSummary, LevelDecision, McFile, ReportConfig, RunReport, StandardErrors, TestSummary,
};
use garchmoments::model::{estimate_moments, simulate, DEFAULT_BURN_IN};
use garchmoments::montecarlo::{export_density_samples, run_experiment, InnovationFamily};
use garchmoments::parallel::with_threads;
use garchmoments::qml::{fit, sigma_blocks, Direction, FitResult, OptimOptions};
use garchmoments::{Execution, Family, ModelSpec, ParamVector, ReturnSeries, SpectralMode};

#[derive(Parser)]
#[command(name = "garchmoments", version, about = "GARCH QML estimation and bootstrap tests for finite even moments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the model and print θ̂, the log-likelihood and residual moments.
    Fit(Common),
    /// Estimates with bootstrap (and plug-in asymptotic) standard errors.
    Se(Common),
    /// Bootstrap test of E[ε^{2m}] < ∞ for each requested m.
    Test(Common),
    /// Write a simulated return series.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment described by a config file.
    Mc(McArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "garch")]
    family: Family,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    q: usize,
    /// Power δ (apgarch).
    #[arg(long)]
    delta: Option<f64>,
    /// Asymmetry γ (apgarch).
    #[arg(long)]
    gamma: Option<f64>,
}

impl ModelArgs {
    fn spec(&self) -> anyhow::Result<ModelSpec> {
        Ok(ModelSpec::new(self.family, self.p, self.q, self.delta, self.gamma)?)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the bootstrap / simulations (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Report file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave run-dependent fields (timing) out of the report.
    #[arg(long)]
    deterministic: bool,
    /// Print human-readable tables instead of the report.
    #[arg(long)]
    table: bool,
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    m: Vec<usize>,
    #[arg(long = "B", default_value_t = 1999)]
    b: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.10")]
    level: Vec<f64>,
    #[arg(long, default_value = "radius")]
    mode: SpectralMode,
    #[arg(long, default_value = "upper")]
    direction: Direction,
    /// CSV file with prices or returns.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "returns")]
    kind: DataKind,
    /// Column name or zero-based index (default: Adj Close, Close, else the last column).
    #[arg(long)]
    column: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    omega: f64,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
    /// gaussian or student.
    #[arg(long, default_value = "gaussian")]
    innovation: String,
    #[arg(long, default_value_t = 9.0)]
    df: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    /// Experiment config (TOML); defaults to the GARCH(1,2) boundary design.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for the rejection table, records and density samples.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    table: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(c) => with_threads(c.run.threads, || cmd_fit(&c)),
        Command::Se(c) => with_threads(c.run.threads, || cmd_se(&c)),
        Command::Test(c) => with_threads(c.run.threads, || cmd_test(&c)),
        Command::Simulate(s) => cmd_simulate(&s),
        Command::Mc(a) => with_threads(a.threads, || cmd_mc(&a)),
    }
}

fn load(c: &Common) -> anyhow::Result<(ModelSpec, ReturnSeries, ReportConfig)> {
    let spec = c.model.spec()?;
    if c.m.is_empty() || c.m.contains(&0) {
        bail!("--m takes positive integers");
    }
    if c.level.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        bail!("--level values must lie in (0, 1)");
    }
    let Some(path) = &c.data else { bail!("--data is required") };
    let selector: ColumnSelector = match &c.column {
        Some(s) => s.parse()?,
        None => ColumnSelector::Auto,
    };
    let data = ingest(path, c.kind, &selector).with_context(|| format!("reading {}", path.display()))?;
    let config = ReportConfig {
        family: spec.family,
        p: spec.p,
        q: spec.q,
        m: c.m.clone(),
        b: None,
        levels: c.level.clone(),
        mode: c.mode,
        direction: c.direction,
        data: Some(path.display().to_string()),
        kind: Some(c.kind),
        column: Some(data.column.clone()),
        n: data.series.len(),
    };
    Ok((spec, data.series, config))
}

fn summarize(spec: &ModelSpec, f: &FitResult, m_max: usize) -> anyhow::Result<FitSummary> {
    let moments = estimate_moments(&f.residuals, spec, m_max)?;
    Ok(FitSummary {
        names: parameter_names(spec),
        estimates: f.theta_hat.to_vec(),
        loglik: f.loglik,
        converged: f.converged,
        iterations: f.iterations,
        gradient_norm: f.gradient_norm,
        moment_names: moment_names(spec, m_max),
        residual_moments: moments.mu,
    })
}

fn fit_checked(spec: &ModelSpec, series: &ReturnSeries) -> anyhow::Result<FitResult> {
    let f = fit(spec, series, &OptimOptions::default())?;
    if !f.converged {
        log::warn!("the optimiser did not converge (projected gradient {:.3e})", f.gradient_norm);
    }
    Ok(f)
}

fn report(command: &str, seed: Option<u64>, config: ReportConfig) -> RunReport {
    RunReport {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        timing_seconds: None,
        config,
        fit: None,
        standard_errors: None,
        tests: Vec::new(),
    }
}

fn emit(mut rep: RunReport, run: &RunArgs, started: Instant) -> anyhow::Result<()> {
    if !run.deterministic {
        rep.timing_seconds = Some(started.elapsed().as_secs_f64());
    }
    let text = rep.to_toml()?;
    match &run.out {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None if !run.table => print!("{text}"),
        None => {}
    }
    if run.table {
        print!("{}", rep.to_table());
    }
    Ok(())
}

fn cmd_fit(c: &Common) -> anyhow::Result<()> {
    let started = Instant::now();
    let (spec, series, config) = load(c)?;
    let f = fit_checked(&spec, &series)?;
    let mut rep = report("fit", None, config);
    rep.fit = Some(summarize(&spec, &f, *c.m.iter().max().expect("non-empty"))?);
    emit(rep, &c.run, started)
}

fn cmd_se(c: &Common) -> anyhow::Result<()> {
    let started = Instant::now();
    let (spec, series, mut config) = load(c)?;
    let seed = c.run.seed.unwrap_or(0);
    let m_max = *c.m.iter().max().expect("non-empty");
    config.b = Some(c.b);
    let f = fit_checked(&spec, &series)?;
    let cfg = BootstrapConfig { b: c.b, seed, mode: c.mode, direction: c.direction, ..BootstrapConfig::default() };
    let draws = bootstrap_joint(&f, &series, m_max, &cfg, &OptimOptions::default())?;
    let blocks = match sigma_blocks(&f, &series, m_max) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("no plug-in standard errors: {e}");
            None
        }
    };
    let n = series.len() as f64;
    let r = spec.n_params();
    let asym = |range: std::ops::Range<usize>| {
        blocks
            .as_ref()
            .map(|b| range.map(|i| (b.sigma[(i, i)].max(0.0) / n).sqrt()).collect::<Vec<f64>>())
    };
    let mut rep = report("se", Some(seed), config);
    rep.fit = Some(summarize(&spec, &f, m_max)?);
    rep.standard_errors = Some(StandardErrors {
        b: c.b,
        b_effective: draws.theta_draws.len(),
        bootstrap: draws.theta_std(),
        bootstrap_moments: draws.mu_std(),
        asymptotic: asym(0..r),
        asymptotic_moments: asym(r..r + m_max),
    });
    emit(rep, &c.run, started)
}

fn cmd_test(c: &Common) -> anyhow::Result<()> {
    let started = Instant::now();
    let (spec, series, mut config) = load(c)?;
    let seed = c.run.seed.unwrap_or(0);
    config.b = Some(c.b);
    let f = fit_checked(&spec, &series)?;
    let cfg = BootstrapConfig { b: c.b, seed, mode: c.mode, direction: c.direction, ..BootstrapConfig::default() };
    let results = bootstrap_test_from_fit(&series, &f, &c.m, &cfg, &OptimOptions::default())?;
    let mut rep = report("test", Some(seed), config);
    rep.fit = Some(summarize(&spec, &f, *c.m.iter().max().expect("non-empty"))?);
    rep.tests = results
        .iter()
        .map(|r| TestSummary {
            m: r.m,
            t_hat: r.t_hat,
            t_hat_c: r.t_hat_c,
            p_value: r.p_value,
            b_effective: r.b_effective,
            failures: r.failures,
            decisions: c.level.iter().map(|&level| LevelDecision { level, reject: r.rejects(level) }).collect(),
        })
        .collect();
    emit(rep, &c.run, started)
}

fn cmd_simulate(s: &SimulateArgs) -> anyhow::Result<()> {
    let spec = s.model.spec()?;
    let innovation = match s.innovation.as_str() {
        "gaussian" | "normal" => InnovationFamily::Gaussian,
        "student" | "t" => InnovationFamily::StudentT { df: s.df },
        other => bail!("unknown innovation '{other}' (gaussian|student)"),
    };
    if s.n == 0 {
        bail!("--n must be positive");
    }
    let theta = ParamVector::new(s.omega, s.alpha.clone(), s.beta.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let eta = innovation.draw(s.n + s.burn_in, &mut rng)?;
    let series = simulate(&spec, &theta, &eta, s.burn_in)?;
    match &s.out {
        Some(path) => write_series_csv(path, series.values())?,
        None => {
            println!("return");
            for v in series.values() {
                println!("{v}");
            }
        }
    }
    Ok(())
}

fn cmd_mc(a: &McArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let file = match &a.config {
        Some(path) => McFile::load(path)?,
        None => McFile::parse("")?,
    };
    let mut cfg = file.into_config(Execution::default())?;
    if let Some(seed) = a.seed {
        cfg.master_seed = seed;
    }
    let output = run_experiment(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_rejection_csv(&a.out.join("rejection.csv"), &output.table)?;
    write_records_csv(&a.out.join("records.csv"), &output)?;
    for d in &output.densities {
        export_density_samples(&output, d.n, d.m, &a.out)?;
    }
    let mut summary = toml::Table::new();
    summary.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    summary.insert("experiment".into(), toml::Value::try_from(&cfg).context("serialising the experiment")?);
    summary.insert("true_theta".into(), toml::Value::try_from(&output.theta).context("serialising θ₀")?);
    summary.insert("failed_simulations".into(), (output.failed_simulations as i64).into());
    if !a.deterministic {
        summary.insert("timing_seconds".into(), started.elapsed().as_secs_f64().into());
    }
    write_text(&a.out.join("report.toml"), &toml::to_string(&summary)?)?;
    if a.table {
        println!("{:>6} {:>3} {:>6} {:>10} {:>6}", "n", "m", "level", "frequency", "S_eff");
        for c in &output.table.cells {
            println!("{:>6} {:>3} {:>6} {:>10.4} {:>6}", c.n, c.m, c.level, c.frequency, c.s_effective);
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
