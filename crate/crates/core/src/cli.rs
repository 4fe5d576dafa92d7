//! Command-line front end: scenario loading, command dispatch and file output.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::channel::{self, McMethod};
use crate::config::{Scenario, ScenarioConfig};
use crate::correlation::{self, CorrelationSet};
use crate::deteq::{self, FixedPointState};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::optimize::{self, Mode, Objective, OptimizeOptions, Quantization};
use crate::phases::PhaseConfig;
use crate::region::{self, RegionOptions};
use crate::variance;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rismac", version, about = "Ergodic sum-MI analysis and phase optimization for multi-RIS MIMO-MAC links")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// scenario file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// output directory, overrides the scenario's
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// worker threads, defaults to available parallelism
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Monte Carlo seed, overrides the scenario's
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub quant: Option<Quantization>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// keep Φ = I in region sweeps
    #[arg(long, global = true)]
    pub freeze_phases: bool,
    /// phase CSV (one row per surface) used instead of Φ = I
    #[arg(long, global = true)]
    pub phases: Option<PathBuf>,
    /// report rates in bits
    #[arg(long, global = true)]
    pub bits: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// deterministic-equivalent mean and variance at fixed phases
    Solve,
    /// phase optimization, optionally quantized
    Optimize,
    /// capacity-region boundary over the priority grid
    Region,
    /// Monte Carlo statistics with the analytic comparison
    Montecarlo,
    /// Gaussian outage probability over a rate grid
    Outage,
    /// correlation matrix diagnostics
    Correlations,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    scenario: Scenario,
    out: PathBuf,
    bits: bool,
}

impl Ctx {
    fn unit(&self) -> f64 {
        if self.bits {
            std::f64::consts::LN_2
        } else {
            1.0
        }
    }

    fn unit_name(&self) -> &'static str {
        if self.bits {
            "bits"
        } else {
            "nats"
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ScenarioConfig::load(path)?;
    if let Some(s) = cli.seed {
        config.mc.seed = s;
    }
    if let Some(q) = cli.quant {
        config.optimizer.quantization = q;
    }
    if let Some(m) = cli.mode {
        config.optimizer.mode = m;
    }
    if cli.freeze_phases {
        config.region.freeze_phases = true;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let bits = cli.bits || config.output.bits;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let scenario = Scenario::new(config)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Ctx { scenario, out, bits };
    let phases = match &cli.phases {
        Some(p) => Some(read_phases(p)?),
        None => None,
    };
    match cli.command {
        Command::Solve => cmd_solve(&ctx, phases),
        Command::Optimize => cmd_optimize(&ctx),
        Command::Region => cmd_region(&ctx),
        Command::Montecarlo => cmd_montecarlo(&ctx, phases),
        Command::Outage => cmd_outage(&ctx, phases),
        Command::Correlations => cmd_correlations(&ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("csv output failed: {e}"))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|x| format!("{x}"))).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// One row per surface, one column per element.
pub fn write_phases(path: &Path, p: &PhaseConfig) -> Result<()> {
    let ns = p.phases.first().map_or(0, |v| v.len());
    let header: Vec<String> = (0..ns).map(|n| format!("phi_{n}")).collect();
    write_rows(path, &header, &p.phases)
}

pub fn read_phases(path: &Path) -> Result<PhaseConfig> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad phase {s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    PhaseConfig::new(rows)
}

#[derive(Serialize)]
struct Echo {
    name: String,
    m: usize,
    k: usize,
    nt: usize,
    nr: usize,
    ns: usize,
    rho_db: f64,
    rho_linear: f64,
    gamma_d_linear: f64,
    coupling: correlation::Coupling,
    units: &'static str,
}

fn echo(ctx: &Ctx) -> Echo {
    let c = &ctx.scenario.config;
    Echo {
        name: c.name.clone(),
        m: c.counts.m,
        k: c.counts.k,
        nt: c.counts.nt,
        nr: c.counts.nr,
        ns: c.counts.ns,
        rho_db: c.rho_db,
        rho_linear: ctx.scenario.rho_linear(),
        gamma_d_linear: ctx.scenario.gamma_d_linear(),
        coupling: c.coupling,
        units: ctx.unit_name(),
    }
}

struct Prepared {
    cs: CorrelationSet,
    q: Vec<CMat>,
    all: Vec<usize>,
}

fn prepare(ctx: &Ctx) -> Result<Prepared> {
    let cs = correlation::build_correlation_set(&ctx.scenario)?;
    let q = cs.isotropic_inputs();
    let all = (0..cs.m()).collect();
    Ok(Prepared { cs, q, all })
}

fn phases_or_identity(p: Option<PhaseConfig>, cs: &CorrelationSet) -> Result<PhaseConfig> {
    let p = p.unwrap_or_else(|| PhaseConfig::identity(cs.k(), cs.ns));
    p.check_dims(cs.k(), cs.ns)?;
    Ok(p)
}

#[derive(Serialize)]
struct SolveReport {
    schema_version: u32,
    command: &'static str,
    scenario: Echo,
    /// per TX antenna
    c: f64,
    /// Nt·C
    sum_mi: f64,
    variance: Option<f64>,
    state: FixedPointState,
    iterations: usize,
    residual: f64,
}

/// Λ-based variance; `None` when Λ is degenerate (for instance at zero power).
fn variance_at(p: &Prepared, phases: &PhaseConfig, state: &FixedPointState) -> Option<f64> {
    variance::assemble_lambda(&p.cs, phases, &p.q, &p.all, state)
        .and_then(|b| variance::variance(&b))
        .ok()
}

fn cmd_solve(ctx: &Ctx, phases: Option<PhaseConfig>) -> Result<()> {
    let p = prepare(ctx)?;
    let phases = phases_or_identity(phases, &p.cs)?;
    let sol = deteq::solve_fixed_point(&p.cs, &phases, &p.q, &p.all, &ctx.scenario.config.solver)?;
    let u = ctx.unit();
    let report = SolveReport {
        schema_version: SCHEMA_VERSION,
        command: "solve",
        scenario: echo(ctx),
        c: sol.c / u,
        sum_mi: p.cs.nt as f64 * sol.c / u,
        variance: variance_at(&p, &phases, &sol.state).map(|v| v / (u * u)),
        state: sol.state,
        iterations: sol.iterations,
        residual: sol.residual,
    };
    write_json(&ctx.path("solve.json"), &report)
}

#[derive(Serialize)]
struct OptimizeReport {
    schema_version: u32,
    command: &'static str,
    scenario: Echo,
    mode: Mode,
    quantization: Quantization,
    identity_sum_mi: f64,
    sum_mi: f64,
    quantized_sum_mi: Option<f64>,
    iterations: usize,
    converged: bool,
    state: FixedPointState,
}

fn cmd_optimize(ctx: &Ctx) -> Result<()> {
    let p = prepare(ctx)?;
    let cfg = &ctx.scenario.config;
    let fp = cfg.solver;
    let nt = p.cs.nt as f64;
    let u = ctx.unit();
    let obj = Objective::sum(&p.all);
    let identity = deteq::solve_fixed_point(&p.cs, &PhaseConfig::identity(p.cs.k(), p.cs.ns), &p.q, &p.all, &fp)?;
    let opts = OptimizeOptions { fixed_point: fp, ..Default::default() };
    let res = optimize::optimize(&p.cs, &p.q, &obj, &cfg.optimizer, &opts)?;
    write_phases(&ctx.path("phases.csv"), &res.phases)?;
    let trace: Vec<Vec<f64>> = res
        .trace
        .iter()
        .map(|r| vec![r.iteration as f64, nt * r.objective / u, r.residual, r.step])
        .collect();
    write_rows(
        &ctx.path("trace.csv"),
        &["iteration".into(), "sum_mi".into(), "residual".into(), "step".into()],
        &trace,
    )?;
    let level = cfg.optimizer.quantization;
    let quantized = match level {
        Quantization::Continuous => None,
        _ => {
            let (qp, c) = optimize::quantize_best_rotation(&p.cs, &p.q, &obj, &res.phases, level, cfg.optimizer.quant_offsets, &fp)?;
            write_phases(&ctx.path("phases_quantized.csv"), &qp)?;
            Some(nt * c / u)
        }
    };
    let report = OptimizeReport {
        schema_version: SCHEMA_VERSION,
        command: "optimize",
        scenario: echo(ctx),
        mode: cfg.optimizer.mode,
        quantization: level,
        identity_sum_mi: nt * identity.c / u,
        sum_mi: nt * res.objective / u,
        quantized_sum_mi: quantized,
        iterations: res.iterations,
        converged: res.converged,
        state: res.solution().state.clone(),
    };
    write_json(&ctx.path("optimize.json"), &report)
}

#[derive(Serialize)]
struct RegionReport {
    schema_version: u32,
    command: &'static str,
    scenario: Echo,
    freeze_phases: bool,
    points: usize,
    skipped: Vec<region::SkippedPoint>,
}

fn cmd_region(ctx: &Ctx) -> Result<()> {
    let p = prepare(ctx)?;
    let cfg = &ctx.scenario.config;
    let m = p.cs.m();
    let grid = cfg.region.mu_grid.clone().unwrap_or_else(|| region::default_mu_grid(m));
    let opts = RegionOptions {
        freeze_phases: cfg.region.freeze_phases,
        initial: None,
        warm_start: true,
        fixed_point: cfg.solver,
    };
    let sweep = region::region_boundary(&p.cs, &p.q, &grid, &cfg.optimizer, &opts)?;
    let u = ctx.unit();
    let mut header: Vec<String> = (1..=m).map(|i| format!("mu_{i}")).collect();
    header.extend((1..=m).map(|i| format!("rate_{i}")));
    header.extend((1..=m).map(|l| format!("sum_mi_first_{l}")));
    let rows: Vec<Vec<f64>> = sweep
        .points
        .iter()
        .map(|pt| {
            let mut r = pt.mu.clone();
            r.extend(pt.rates.iter().map(|x| x / u));
            r.extend(pt.subset_mis.iter().map(|c| p.cs.nt as f64 * c / u));
            r
        })
        .collect();
    write_rows(&ctx.path("region.csv"), &header, &rows)?;
    let report = RegionReport {
        schema_version: SCHEMA_VERSION,
        command: "region",
        scenario: echo(ctx),
        freeze_phases: opts.freeze_phases,
        points: sweep.points.len(),
        skipped: sweep.skipped,
    };
    write_json(&ctx.path("region.json"), &report)
}

#[derive(Serialize)]
struct McReport {
    schema_version: u32,
    command: &'static str,
    scenario: Echo,
    n_draws: usize,
    seed: u64,
    mc_mean: f64,
    mc_variance: f64,
    mc_std_err_mean: f64,
    mc_std_err_variance: f64,
    analytic_mean: f64,
    analytic_variance: Option<f64>,
    relative_mean_gap: f64,
    relative_variance_gap: Option<f64>,
}

fn cmd_montecarlo(ctx: &Ctx, phases: Option<PhaseConfig>) -> Result<()> {
    let p = prepare(ctx)?;
    let cfg = &ctx.scenario.config;
    let phases = phases_or_identity(phases, &p.cs)?;
    let sol = deteq::solve_fixed_point(&p.cs, &phases, &p.q, &p.all, &cfg.solver)?;
    let var = variance_at(&p, &phases, &sol.state);
    let mc = channel::mc_statistics(&p.cs, &phases, &p.q, &p.all, cfg.mc.n_draws, cfg.mc.seed, McMethod::Fast)?;
    let u = ctx.unit();
    let mean = p.cs.nt as f64 * sol.c;
    let rows: Vec<Vec<f64>> = mc.samples.iter().map(|x| vec![x / u]).collect();
    write_rows(&ctx.path("samples.csv"), &["sum_mi".into()], &rows)?;
    // empirical CDF on the sorted samples next to its Gaussian approximation
    let n = mc.samples.len() as f64;
    let cdf: Vec<Vec<f64>> = mc
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = var.and_then(|v| variance::gaussian_outage(mean, v, x).ok()).unwrap_or(f64::NAN);
            vec![x / u, (i + 1) as f64 / n, g]
        })
        .collect();
    write_rows(&ctx.path("cdf.csv"), &["sum_mi".into(), "empirical_cdf".into(), "gaussian_cdf".into()], &cdf)?;
    let report = McReport {
        schema_version: SCHEMA_VERSION,
        command: "montecarlo",
        scenario: echo(ctx),
        n_draws: mc.n_draws,
        seed: cfg.mc.seed,
        mc_mean: mc.mean / u,
        mc_variance: mc.variance / (u * u),
        mc_std_err_mean: mc.std_err_mean / u,
        mc_std_err_variance: mc.std_err_variance / (u * u),
        analytic_mean: mean / u,
        analytic_variance: var.map(|v| v / (u * u)),
        relative_mean_gap: (mean - mc.mean) / mc.mean,
        relative_variance_gap: var.map(|v| (v - mc.variance) / mc.variance),
    };
    write_json(&ctx.path("montecarlo.json"), &report)
}

/// Rates in nats around the mean, odd length so the mean itself is on the grid.
pub fn default_rate_grid(mean: f64, sd: f64) -> Vec<f64> {
    (-20..=20).map(|i| mean + sd * i as f64 / 5.0).collect()
}

fn cmd_outage(ctx: &Ctx, phases: Option<PhaseConfig>) -> Result<()> {
    let p = prepare(ctx)?;
    let cfg = &ctx.scenario.config;
    let phases = phases_or_identity(phases, &p.cs)?;
    let sol = deteq::solve_fixed_point(&p.cs, &phases, &p.q, &p.all, &cfg.solver)?;
    let mean = p.cs.nt as f64 * sol.c;
    let var = variance::variance(&variance::assemble_lambda(&p.cs, &phases, &p.q, &p.all, &sol.state)?)?;
    let u = ctx.unit();
    // configured rates are in the output unit
    let rates: Vec<f64> = match &cfg.outage.rates {
        Some(r) => r.iter().map(|x| x * u).collect(),
        None => default_rate_grid(mean, var.sqrt()),
    };
    let mut rows = Vec::with_capacity(rates.len());
    for r in rates {
        rows.push(vec![r / u, variance::gaussian_outage(mean, var, r)?]);
    }
    write_rows(&ctx.path("outage.csv"), &["rate".into(), "p_out".into()], &rows)
}

#[derive(Serialize)]
struct MatrixSummary {
    name: String,
    dim: usize,
    trace: f64,
    /// eigenvalues above 1e-12 of the largest
    rank: usize,
    largest_eigenvalues: Vec<f64>,
}

fn summarize_matrix(name: String, a: &CMat) -> Result<MatrixSummary> {
    let mut w = linalg::herm_eigvals(a)?;
    w.reverse();
    let top = w.first().copied().unwrap_or(0.0);
    Ok(MatrixSummary {
        name,
        dim: a.nrows(),
        trace: linalg::trace(a).re,
        rank: w.iter().filter(|&&x| x > 1e-12 * top).count(),
        largest_eigenvalues: w.iter().take(8).copied().collect(),
    })
}

fn cmd_correlations(ctx: &Ctx) -> Result<()> {
    let p = prepare(ctx)?;
    let cs = &p.cs;
    let mut out = vec![summarize_matrix("rx".into(), &cs.r_k.first().unwrap_or(&cs.r_d[0]).clone())?];
    out.push(summarize_matrix("tx".into(), &cs.t_d[0])?);
    for k in 0..cs.k() {
        out.push(summarize_matrix(format!("ris{k}_out"), &cs.s_r[k])?);
        for m in 0..cs.m() {
            out.push(summarize_matrix(format!("ris{k}_in_tx{m}"), &cs.s_t[k][m])?);
        }
    }
    #[derive(Serialize)]
    struct Report {
        schema_version: u32,
        command: &'static str,
        scenario: Echo,
        matrices: Vec<MatrixSummary>,
    }
    // full spectra for plotting
    let mut spectra = Vec::new();
    for k in 0..cs.k() {
        let mut w = linalg::herm_eigvals(&cs.s_r[k])?;
        w.reverse();
        spectra.push(w);
        for m in 0..cs.m() {
            let mut w = linalg::herm_eigvals(&cs.s_t[k][m])?;
            w.reverse();
            spectra.push(w);
        }
    }
    if !spectra.is_empty() {
        let names: Vec<String> = out.iter().skip(2).map(|s| s.name.clone()).collect();
        let rows: Vec<Vec<f64>> = (0..cs.ns).map(|i| spectra.iter().map(|w| w[i]).collect()).collect();
        write_rows(&ctx.path("ris_spectra.csv"), &names, &rows)?;
    }
    write_json(
        &ctx.path("correlations.json"),
        &Report { schema_version: SCHEMA_VERSION, command: "correlations", scenario: echo(ctx), matrices: out },
    )
}
