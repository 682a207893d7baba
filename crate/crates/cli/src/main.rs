//! `optclear`: run the two-stage market, clear the options market and emit
//! result tables.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use optclear::clearing::{
    aggregate_report, clear, ftr_report, reevaluate, traders_from_run, traders_with_ftr,
    ClearingConfig, ReportRow,
};
use optclear::config::{ClearMode, ConfigError, RunConfig, ScenarioSpec, WindSpec};
use optclear::copperplate::{
    acceptability_boundary, baseline_variances, central_optimum, loss_region, oracle_error,
    profit_profiles, CentralOptimum, CopperplateError, CopperplateInstance,
};
use optclear::instances::random_instance;
use optclear::io::{self, BoundaryRow};
use optclear::market::{run_market, MarketError};
use optclear::options::Role;
use optclear::qp::QpError;

const BUNDLED_COPPERPLATE: &str = include_str!("../data/copperplate.json");

#[derive(Parser)]
#[command(
    name = "optclear",
    version,
    about = "Two-stage market simulation and options clearing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the scenario count.
    #[arg(long, global = true)]
    scenarios: Option<usize>,
    /// Seed for sampled scenarios and random solver starts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Smoothing sharpness (1/$).
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve both market stages; writes forward.json, realtime.csv, profits.csv.
    Dispatch,
    /// Clear the options market; writes trades.json, allocation.csv, ms.csv,
    /// variance_report.csv.
    Clear {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Closed-form copperplate report with profit curves and acceptability
    /// boundaries.
    Copperplate {
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        d: Option<f64>,
        /// CVaR levels for the boundary surfaces, comma separated.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
    },
    /// Clear, then report variances with the configured FTR positions added.
    Ftr {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Built-in consistency checks.
    Selftest {
        /// Random instances to clear.
        #[arg(long, default_value_t = 5)]
        instances: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Social,
    So,
    Selfish,
}

impl From<Mode> for ClearMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Social => ClearMode::Social,
            Mode::So => ClearMode::So,
            Mode::Selfish => ClearMode::Selfish,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn market_code(e: &MarketError) -> u8 {
    match e {
        MarketError::ForwardInfeasible
        | MarketError::RealtimeInfeasible(_)
        | MarketError::SentinelBinding { .. } => 2,
        MarketError::Solver { source, .. } => qp_code(source),
        MarketError::ScenarioFailures(v) => v.first().map_or(2, market_code),
        _ => 4,
    }
}

fn qp_code(e: &QpError) -> u8 {
    match e {
        QpError::Infeasible | QpError::Unbounded => 2,
        QpError::NoConvergence(_) => 3,
        QpError::Malformed(_) => 4,
    }
}

/// 2: infeasible model, 3: solver non-convergence, 4: configuration error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<MarketError>() {
            return market_code(e);
        }
        if let Some(e) = cause.downcast_ref::<QpError>() {
            return qp_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Market(m) => market_code(m),
                ConfigError::Copperplate(CopperplateError::Market(m)) => market_code(m),
                _ => 4,
            };
        }
        if cause.downcast_ref::<CopperplateError>().is_some() {
            return 4;
        }
    }
    1
}

fn run(cli: &Cli) -> Result<()> {
    if let Ok(v) = std::env::var("OPTCLEAR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("OPTCLEAR_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the thread pool")?;
    }
    match &cli.command {
        Command::Dispatch => cmd_dispatch(cli),
        Command::Clear { mode } => cmd_clear(cli, *mode),
        Command::Copperplate {
            mu,
            sigma,
            rho,
            epsilon,
            d,
            alpha,
        } => {
            let over = [*mu, *sigma, *rho, *epsilon, *d];
            cmd_copperplate(cli, over, alpha)
        }
        Command::Ftr { mode } => cmd_ftr(cli, *mode),
        Command::Selftest { instances } => cmd_selftest(*instances),
    }
}

/// The run configuration with command-line overrides applied.
fn load_config(cli: &Cli, fallback: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(text)) => serde_json::from_str(text).context("bundled configuration")?,
        (None, None) => return Err(ConfigError::Invalid("--config is required".into()).into()),
    };
    if let Some(n) = cli.scenarios {
        if n == 0 {
            return Err(ConfigError::Invalid("--scenarios must be at least 1".into()).into());
        }
        match cfg.scenarios.as_mut() {
            Some(s) => s.with_count(n),
            None => {
                return Err(
                    ConfigError::Invalid("no scenario specification to resize".into()).into(),
                )
            }
        }
    }
    if let Some(seed) = cli.seed {
        if let Some(s) = cfg.scenarios.as_mut() {
            s.with_seed(seed);
        }
        cfg.clearing.seed = Some(seed);
    }
    if let Some(beta) = cli.beta {
        if !(beta > 0.0) {
            return Err(ConfigError::Invalid("--beta must be positive".into()).into());
        }
        cfg.clearing.beta = Some(beta);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn cmd_dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let run = cfg.load()?;
    let t0 = Instant::now();
    let outcome = run_market(&run.market)?;
    let dir = out_dir(&cfg)?;
    io::write_json(
        &dir.join("forward.json"),
        &io::forward_report(&run.market, &outcome),
    )?;
    io::write_table(
        &dir.join("realtime.csv"),
        &io::realtime_rows(&run.market, &outcome),
    )?;
    io::write_table(
        &dir.join("profits.csv"),
        &io::profit_rows(&run.market, &outcome),
    )?;
    println!(
        "dispatched {} participants over {} scenarios in {:.2?}",
        run.market.participants.len(),
        outcome.scenarios.len(),
        t0.elapsed()
    );
    for (p, pi) in run.market.participants.iter().zip(&outcome.profits) {
        println!(
            "  {:<8} X = {:>10.4}  E[π] = {:>12.4}  var[π] = {:>12.4}",
            p.id,
            outcome.forward.dispatch[run.market.participant_index(&p.id).unwrap_or(0)],
            pi.expectation(),
            pi.variance()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn clearing_config(cfg: &RunConfig, mode: Option<Mode>) -> ClearingConfig {
    let mut cc = ClearingConfig::from(&cfg.clearing);
    if let Some(m) = mode {
        cc.mode = m.into();
    }
    cc
}

fn print_report(rows: &[ReportRow]) {
    println!(
        "  {:<8} {:<6} {:>14} {:>14} {:>14}",
        "id", "role", "var before", "var after", "delta"
    );
    for r in rows {
        let role = match r.role {
            Role::Buyer => "buyer",
            Role::Seller => "seller",
        };
        println!(
            "  {:<8} {:<6} {:>14.4} {:>14.4} {:>14.4}",
            r.id, role, r.var_before, r.var_after, r.delta
        );
    }
    println!(
        "  aggregate delta {:.4}",
        rows.iter().map(|r| r.delta).sum::<f64>()
    );
}

fn cmd_clear(cli: &Cli, mode: Option<Mode>) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let run = cfg.load()?;
    let t0 = Instant::now();
    let outcome = run_market(&run.market)?;
    let traders = traders_from_run(&run, &outcome)?;
    let cc = clearing_config(&cfg, mode);
    let result = clear(&traders, &cc)?;
    let report = aggregate_report(&traders, &result)?;
    let dir = out_dir(&cfg)?;
    io::write_json(&dir.join("trades.json"), &io::trades_report(&result))?;
    io::write_table(&dir.join("allocation.csv"), &io::allocation_rows(&result))?;
    io::write_table(&dir.join("ms.csv"), &io::ms_rows(&result))?;
    io::write_table(
        &dir.join("variance_report.csv"),
        &io::variance_rows(&report),
    )?;
    io::write_table(
        &dir.join("option_profits.csv"),
        &io::option_profit_rows(&result),
    )?;
    println!("{:?} clearing in {:.2?}", cc.mode, t0.elapsed());
    for (id, t) in result.ids.iter().zip(result.trades()) {
        println!(
            "  {:<8} q = {:>10.4}  K = {:>10.4}  Δ = {:>8.4}",
            id, t.q, t.k, t.delta
        );
    }
    print_report(&report);
    println!(
        "  E[MS] = {:.3e}  max |MS| = {:.3e}  tolerance {:.3e}",
        result.evaluation.expected_ms,
        result.evaluation.max_abs_ms(),
        result.diagnostics.tolerances.ms_tol
    );
    if result.diagnostics.fallback {
        println!("  note: no acceptable nonzero trade was found; returning the zero trade");
    }
    if cc.mode == ClearMode::Selfish {
        let flagged: Vec<&str> = report
            .iter()
            .filter(|r| !r.reduces)
            .map(|r| r.id.as_str())
            .collect();
        if !flagged.is_empty() {
            println!(
                "  note: selfish clearing gives no variance guarantee; no reduction for {}",
                flagged.join(", ")
            );
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_ftr(cli: &Cli, mode: Option<Mode>) -> Result<()> {
    let cfg = load_config(cli, None)?;
    let run = cfg.load()?;
    if run.ftr.is_empty() {
        return Err(ConfigError::Invalid("the configuration holds no FTR positions".into()).into());
    }
    let outcome = run_market(&run.market)?;
    let traders = traders_from_run(&run, &outcome)?;
    let cc = clearing_config(&cfg, mode);
    let result = clear(&traders, &cc)?;
    let base = aggregate_report(&traders, &result)?;
    let with_ftr = traders_with_ftr(&run, &outcome, &traders)?;
    let augmented = ftr_report(&traders, &reevaluate(&with_ftr, &result, &cc)?)?;
    let dir = out_dir(&cfg)?;
    io::write_json(&dir.join("trades.json"), &io::trades_report(&result))?;
    io::write_table(&dir.join("variance_report.csv"), &io::variance_rows(&base))?;
    io::write_table(
        &dir.join("variance_report_ftr.csv"),
        &io::variance_rows(&augmented),
    )?;
    println!("options only");
    print_report(&base);
    println!("options and FTR");
    print_report(&augmented);
    for (b, a) in base.iter().zip(&augmented) {
        if a.var_after != b.var_after {
            println!("  {}: delta {:.4} -> {:.4}", a.id, b.delta, a.delta);
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct CopperplateReport {
    instance: CopperplateInstance,
    scenarios: usize,
    oracle_max_error: f64,
    loss_region: Option<(f64, f64)>,
    baseline_variance_wind: f64,
    baseline_variance_peaker: f64,
    central_optimum: CentralOptimum,
}

fn cmd_copperplate(cli: &Cli, over: [Option<f64>; 5], alphas: &[f64]) -> Result<()> {
    let mut cfg = load_config(cli, Some(BUNDLED_COPPERPLATE))?;
    let Some(mut spec) = cfg.copperplate.clone() else {
        return Err(
            ConfigError::Invalid("the configuration has no copperplate section".into()).into(),
        );
    };
    let inst = &mut spec.instance;
    for (field, value) in [
        &mut inst.mu,
        &mut inst.sigma,
        &mut inst.rho,
        &mut inst.epsilon,
        &mut inst.d,
    ]
    .into_iter()
    .zip(over)
    {
        if let Some(v) = value {
            *field = v;
        }
    }
    inst.validate()?;
    let inst = spec.instance;
    let alphas = if alphas.is_empty() {
        spec.alphas.clone()
    } else {
        alphas.to_vec()
    };
    if alphas.iter().any(|a| !(0.0..1.0).contains(a)) {
        return Err(ConfigError::Invalid("CVaR levels must lie in [0, 1)".into()).into());
    }
    let n = cfg.scenarios.as_ref().map_or(400, ScenarioSpec::count);
    cfg.scenarios = Some(ScenarioSpec::Grid {
        wind: vec![WindSpec {
            mu: inst.mu,
            sigma: inst.sigma,
        }],
        n,
    });

    let h = inst.half_width();
    let opt = central_optimum(&inst, h)?;
    let (var_w, var_p) = baseline_variances(&inst);
    let report = CopperplateReport {
        instance: inst,
        scenarios: n,
        oracle_max_error: oracle_error(&inst, n)?,
        loss_region: loss_region(&inst),
        baseline_variance_wind: var_w,
        baseline_variance_peaker: var_p,
        central_optimum: opt,
    };
    let profiles = profit_profiles(&inst, opt.q, opt.k, opt.delta, n)?;
    let g = spec.grid.max(2);
    let q_max = 0.5 / inst.rho;
    let mut boundary = Vec::new();
    for &alpha in &alphas {
        for role in [Role::Seller, Role::Buyer] {
            for i in 0..g {
                let q = q_max * i as f64 / (g - 1) as f64;
                for j in 1..=g {
                    let delta = h * j as f64 / g as f64;
                    let k =
                        acceptability_boundary(&inst, alpha, role, q, delta, inst.peak_price(), n)?;
                    boundary.push(BoundaryRow {
                        alpha,
                        role: match role {
                            Role::Buyer => "W".into(),
                            Role::Seller => "P".into(),
                        },
                        q,
                        delta,
                        k,
                    });
                }
            }
        }
    }
    let dir = out_dir(&cfg)?;
    io::write_json(&dir.join("copperplate.json"), &report)?;
    io::write_table(&dir.join("fig2_profits.csv"), &profiles)?;
    io::write_table(&dir.join("fig3_boundary.csv"), &boundary)?;
    println!(
        "copperplate μ = {}, σ = {}, ρ = {}, ε = {}, d = {}",
        inst.mu, inst.sigma, inst.rho, inst.epsilon, inst.d
    );
    println!(
        "  oracle max error {:.3e} over {n} scenarios",
        report.oracle_max_error
    );
    match report.loss_region {
        Some((lo, hi)) => println!("  loss region [{lo:.3}, {hi:.3})"),
        None => println!("  loss region empty"),
    }
    println!(
        "  central optimum q = {:.4}, K = {:.4}, Δ = {:.4}, aggregate delta {:.4}",
        opt.q, opt.k, opt.delta, opt.aggregate_delta
    );
    println!("wrote {}", dir.display());
    Ok(())
}

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn cmd_selftest(instances: u64) -> Result<()> {
    let mut checks = Vec::new();
    let inst = CopperplateInstance::new(10.0, 1.0, 3f64.sqrt() / 20.0, 0.5, 20.0)?;
    let err = oracle_error(&inst, 400)?;
    checks.push(Check {
        name: "copperplate market matches closed forms".into(),
        pass: err <= 1e-6,
        detail: format!("max error {err:.2e}"),
    });

    let cfg: RunConfig = serde_json::from_str(BUNDLED_COPPERPLATE)?;
    let run = cfg.load()?;
    let outcome = run_market(&run.market)?;
    let traders = traders_from_run(&run, &outcome)?;
    let result = clear(&traders, &ClearingConfig::default())?;
    let target = optclear::copperplate::central_aggregate_delta(&inst);
    let t = result.trades()[0];
    let rel = (result.aggregate_delta() - target).abs() / target.abs();
    checks.push(Check {
        name: "copperplate social clearing".into(),
        pass: rel <= 0.01 && (2.0 * t.q + t.k - 1.0 / inst.rho).abs() <= 1e-3,
        detail: format!(
            "aggregate {:.4} vs {:.4}, 2q + K = {:.6}",
            result.aggregate_delta(),
            target,
            2.0 * t.q + t.k
        ),
    });

    for seed in 0..instances {
        let ri = random_instance(seed, 30)?;
        let traders = ri.traders()?;
        let r = clear(&traders, &ClearingConfig::default())?;
        let report = aggregate_report(&traders, &r)?;
        let identity = report
            .iter()
            .map(|row| (row.covariance - row.delta).abs())
            .fold(0.0, f64::max);
        let tol = r.diagnostics.tolerances;
        checks.push(Check {
            name: format!("random instance {seed}"),
            pass: r.aggregate_delta() <= 1e-8
                && r.evaluation.max_abs_ms() <= tol.ms_tol
                && identity <= 1e-8 * (1.0 + report.iter().map(|r| r.var_before).sum::<f64>()),
            detail: format!(
                "aggregate {:.4}, max |MS| {:.2e}",
                r.aggregate_delta(),
                r.evaluation.max_abs_ms()
            ),
        });
    }
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {} ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += usize::from(!c.pass);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}
