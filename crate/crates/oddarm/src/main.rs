//! Command-line front door: validate a config, solve for the optimal-drift
//! constant and sampling tables, run Monte-Carlo sweeps, and check drifts.
//!
//! Exit codes: 0 on success, 1 when validation fails, 2 on runtime failure.

use clap::{Parser, Subcommand};
use oddarm::config::{config_hash, diagnostics, RunConfig, SolveMethod};
use oddarm::env::BanditInstance;
use oddarm::harness::{
    drift_check, run_sweep, slope_report, write_cells_csv, write_trials_jsonl, SweepResult,
};
use oddarm::llr::PairKlCache;
use oddarm::policy::{PolicyParams, PolicyTable};
use oddarm::solver::{
    build_truncated_mdp, lower_bound_expected_tau, rstar_eta_curve, solve_r1star, solve_rstar,
    subgradient::{solve_rstar_subgradient, SubgradientOptions},
    SolverResult,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "oddarm",
    version,
    about = "Odd-arm identification in restless Markov bandits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every instance assumption and report the discovered mixing exponent
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute r*, the per-arm bound R1*, and per-hypothesis sampling tables
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run trials at a single confidence level
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Confidence level L (defaults to the first sweep value)
        #[arg(long)]
        l: Option<f64>,
        /// Master seed override
        #[arg(long)]
        seed: Option<u64>,
        /// Trials per (L, hypothesis) cell
        #[arg(long)]
        trials: Option<u64>,
        /// Worker threads (defaults to all cores)
        #[arg(long)]
        parallelism: Option<usize>,
        /// Censor trials after this many ticks
        #[arg(long)]
        max_steps: Option<u64>,
        /// Also write one JSON line per trial
        #[arg(long)]
        trial_log: bool,
        /// Solve for missing sampling tables instead of failing
        #[arg(long)]
        auto_solve: bool,
    },
    /// Run the full sweep over the config's confidence levels
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override
        #[arg(long)]
        seed: Option<u64>,
        /// Trials per (L, hypothesis) cell
        #[arg(long)]
        trials: Option<u64>,
        /// Worker threads (defaults to all cores)
        #[arg(long)]
        parallelism: Option<usize>,
        /// Censor trials after this many ticks
        #[arg(long)]
        max_steps: Option<u64>,
        /// Also write one JSON line per trial
        #[arg(long)]
        trial_log: bool,
        /// Solve for missing sampling tables instead of failing
        #[arg(long)]
        auto_solve: bool,
    },
    /// Compare empirical LLR drifts against the stationary-solve prediction
    Drift {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the JSON report (stdout only when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ticks to simulate
        #[arg(long, default_value_t = 100_000)]
        horizon: u64,
        /// Master seed override
        #[arg(long)]
        seed: Option<u64>,
        /// Sampling table JSON (uniform when omitted)
        #[arg(long)]
        lambda: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Envelope<T: Serialize> {
    version: &'static str,
    config_hash: String,
    #[serde(flatten)]
    payload: T,
}

fn envelope<T: Serialize>(hash: &str, payload: T) -> Envelope<T> {
    Envelope {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash.to_string(),
        payload,
    }
}

enum CmdError {
    Validation(String),
    Runtime(String),
}

impl CmdError {
    fn code(&self) -> ExitCode {
        match self {
            CmdError::Validation(_) => ExitCode::from(1),
            CmdError::Runtime(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Validation(m) | CmdError::Runtime(m) => m,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Solve { config, out } => cmd_solve(&config, out.as_deref()),
        Command::Simulate {
            config,
            out,
            l,
            seed,
            trials,
            parallelism,
            max_steps,
            trial_log,
            auto_solve,
        } => cmd_sweep(
            &config,
            out.as_deref(),
            l.map(|v| vec![v]),
            seed,
            trials,
            parallelism,
            max_steps,
            trial_log,
            auto_solve,
            true,
        ),
        Command::Sweep {
            config,
            out,
            seed,
            trials,
            parallelism,
            max_steps,
            trial_log,
            auto_solve,
        } => cmd_sweep(
            &config,
            out.as_deref(),
            None,
            seed,
            trials,
            parallelism,
            max_steps,
            trial_log,
            auto_solve,
            false,
        ),
        Command::Drift {
            config,
            out,
            horizon,
            seed,
            lambda,
        } => cmd_drift(&config, out.as_deref(), horizon, seed, lambda.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load(config_path: &Path) -> Result<(RunConfig, String), CmdError> {
    let (cfg, text) =
        RunConfig::load(config_path).map_err(|e| CmdError::Validation(e.to_string()))?;
    Ok((cfg, config_hash(&text)))
}

fn build_instance(cfg: &RunConfig) -> Result<BanditInstance, CmdError> {
    cfg.build_instance()
        .map_err(|e| CmdError::Validation(e.to_string()))
}

fn cmd_validate(config_path: &Path) -> Result<(), CmdError> {
    let (cfg, hash) = load(config_path)?;
    println!("config {} (hash {hash})", config_path.display());
    let diags = diagnostics(&cfg.instance);
    let mut first_failure: Option<String> = None;
    for d in &diags {
        let mark = if d.ok { "ok  " } else { "FAIL" };
        println!("  [{mark}] {:<14} {}", d.check, d.detail);
        if !d.ok && first_failure.is_none() {
            first_failure = Some(format!("{}: {}", d.check, d.detail));
        }
    }
    match first_failure {
        Some(msg) => Err(CmdError::Validation(msg)),
        None => {
            // full construction exercises anything diagnostics may have missed
            build_instance(&cfg)?;
            println!("instance OK");
            Ok(())
        }
    }
}

fn solve_one(
    instance: &BanditInstance,
    cfg: &RunConfig,
    hypothesis: usize,
) -> Result<SolverResult, CmdError> {
    let mdp = build_truncated_mdp(instance, hypothesis, cfg.solver.d_cap).map_err(runtime)?;
    match cfg.solver.method {
        SolveMethod::Exact => solve_rstar(&mdp, instance.eta(), cfg.solver.tol).map_err(runtime),
        SolveMethod::Subgradient => {
            solve_rstar_subgradient(&mdp, instance.eta(), SubgradientOptions::default())
                .map_err(runtime)
        }
    }
}

fn lambda_path(dir: &Path, hypothesis: usize) -> PathBuf {
    dir.join(format!("lambda_h{hypothesis}.json"))
}

fn cmd_solve(config_path: &Path, out: Option<&Path>) -> Result<(), CmdError> {
    let (cfg, hash) = load(config_path)?;
    let instance = build_instance(&cfg)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;

    let mut r_stars = Vec::new();
    for h in 0..instance.n_arms() {
        let res = solve_one(&instance, &cfg, h)?;
        let lam_file = lambda_path(&out_dir, h);
        std::fs::write(&lam_file, res.lambda.to_json().map_err(runtime)?).map_err(runtime)?;
        let mdp_states = res.nu.state_marginal().len();
        // reference the table by name so artifacts are relocatable
        let file = res.to_file(mdp_states, format!("lambda_h{h}.json"));
        let json = serde_json::to_string_pretty(&envelope(&hash, file)).map_err(runtime)?;
        std::fs::write(out_dir.join(format!("solver_h{h}.json")), json).map_err(runtime)?;
        println!(
            "h = {h}: r* = {:.9}  (method {}, D = {}, residual {:.2e})",
            res.r_star, res.method, res.d_cap, res.residual
        );
        for (hp, v) in &res.certificate {
            println!("         drift toward h' = {hp}: {v:.9}");
        }
        r_stars.push(res.r_star);
    }

    let r1 = solve_r1star(&instance, 0, cfg.solver.d_cap).map_err(runtime)?;
    let r0 = r_stars[0];
    println!("R1* = {r1:.9} (per-arm relaxation at the same cap)");
    if r1 < r0 - 1e-9 {
        println!("WARNING: R1* = {r1} fell below r* = {r0}; the relaxation should dominate");
    }

    if let Some(grid) = &cfg.solver.eta_grid {
        let curve = rstar_eta_curve(&instance, 0, cfg.solver.d_cap, grid, cfg.solver.tol)
            .map_err(runtime)?;
        println!("eta curve (non-increasing in eta):");
        for (eta, r) in &curve {
            println!("  eta = {eta:<6} r* = {r:.9}");
        }
        let curve_json =
            serde_json::to_string_pretty(&envelope(&hash, serde_json::json!({ "curve": curve })))
                .map_err(runtime)?;
        std::fs::write(out_dir.join("eta_curve.json"), curve_json).map_err(runtime)?;
    }
    println!("wrote solver artifacts to {}", out_dir.display());
    Ok(())
}

fn load_or_solve_tables(
    instance: &BanditInstance,
    cfg: &RunConfig,
    out_dir: &Path,
    auto_solve: bool,
) -> Result<(Vec<PolicyTable>, f64), CmdError> {
    let mut tables = Vec::new();
    let mut r_star = f64::NAN;
    for h in 0..instance.n_arms() {
        let path = lambda_path(out_dir, h);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                tables.push(PolicyTable::from_json(&text).map_err(runtime)?);
                // r* comes from the solver file when present
                if h == 0 {
                    let solver_file = out_dir.join("solver_h0.json");
                    if let Ok(text) = std::fs::read_to_string(solver_file) {
                        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                            r_star = v["r_star"].as_f64().unwrap_or(f64::NAN);
                        }
                    }
                }
            }
            Err(_) if auto_solve => {
                let res = solve_one(instance, cfg, h)?;
                std::fs::create_dir_all(out_dir).map_err(runtime)?;
                std::fs::write(&path, res.lambda.to_json().map_err(runtime)?).map_err(runtime)?;
                if h == 0 {
                    r_star = res.r_star;
                }
                tables.push(res.lambda);
            }
            Err(_) => {
                return Err(CmdError::Runtime(format!(
                    "sampling table {} not found; run `oddarm solve --config ...` first or pass --auto-solve",
                    path.display()
                )));
            }
        }
    }
    Ok((tables, r_star))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config_path: &Path,
    out: Option<&Path>,
    l_override: Option<Vec<f64>>,
    seed: Option<u64>,
    trials: Option<u64>,
    parallelism: Option<usize>,
    max_steps: Option<u64>,
    trial_log: bool,
    auto_solve: bool,
    single: bool,
) -> Result<(), CmdError> {
    let (cfg, hash) = load(config_path)?;
    let instance = build_instance(&cfg)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;

    let (tables, r_star) = load_or_solve_tables(&instance, &cfg, &out_dir, auto_solve)?;
    let cache = PairKlCache::new(&instance, cfg.sweep.d_cap_llr).map_err(runtime)?;

    if cfg.sweep.l_values.is_empty() && l_override.is_none() {
        return Err(CmdError::Validation(
            "sweep.l_values must list at least one confidence level".into(),
        ));
    }
    let l_values = l_override.unwrap_or_else(|| {
        if single {
            vec![cfg.sweep.l_values[0]]
        } else {
            cfg.sweep.l_values.clone()
        }
    });
    if l_values.iter().any(|&l| l <= 1.0 || l.is_nan()) {
        return Err(CmdError::Validation(format!(
            "confidence levels must exceed 1, got {l_values:?}"
        )));
    }
    if cfg.solver.delta <= 0.0 || cfg.solver.delta.is_nan() {
        return Err(CmdError::Validation(format!(
            "solver.delta must be positive, got {}",
            cfg.solver.delta
        )));
    }
    let grid: Vec<PolicyParams> = l_values
        .iter()
        .map(|&l| PolicyParams::new(l, cfg.solver.delta))
        .collect();
    let master_seed = seed.unwrap_or(cfg.sweep.master_seed);
    let trials_per_cell = trials.unwrap_or(cfg.sweep.trials_per_cell);
    let max_steps = max_steps.unwrap_or(cfg.sweep.max_steps);
    let parallelism = parallelism.or(cfg.sweep.parallelism);

    let sweep = run_sweep(
        &instance,
        &grid,
        &tables,
        &cache,
        trials_per_cell,
        parallelism,
        master_seed,
        max_steps,
        cfg.sweep.warmup,
    )
    .map_err(runtime)?;
    print_sweep_summary(&sweep, r_star);

    let note = format!(
        "oddarm v{} config_hash={hash} master_seed={master_seed}",
        env!("CARGO_PKG_VERSION")
    );
    let mut csv = Vec::new();
    write_cells_csv(&mut csv, &sweep.cells, &note).map_err(runtime)?;
    let csv_path = out_dir.join(if single { "simulate.csv" } else { "sweep.csv" });
    std::fs::write(&csv_path, csv).map_err(runtime)?;
    if trial_log {
        let mut jsonl = Vec::new();
        write_trials_jsonl(&mut jsonl, &sweep.records).map_err(runtime)?;
        std::fs::write(out_dir.join("trials.jsonl"), jsonl).map_err(runtime)?;
    }

    if !single && l_values.len() >= 3 && r_star.is_finite() {
        match slope_report(&sweep, r_star, cfg.solver.delta, 0.25) {
            Ok(report) => {
                println!(
                    "slope of mean tau vs ln L: {:.3} (band [{:.3}, {:.3}]) -> {}",
                    report.slope,
                    report.band_lo,
                    report.band_hi,
                    if report.in_band {
                        "in band"
                    } else {
                        "OUT OF BAND"
                    }
                );
                let json =
                    serde_json::to_string_pretty(&envelope(&hash, report)).map_err(runtime)?;
                std::fs::write(out_dir.join("slope.json"), json).map_err(runtime)?;
            }
            Err(e) => println!("slope: {e}"),
        }
    }
    println!("wrote {}", csv_path.display());
    if !sweep.failures.is_empty() {
        println!("{} trial(s) failed; see stderr", sweep.failures.len());
        for f in &sweep.failures {
            eprintln!("trial failure: {f}");
        }
    }
    Ok(())
}

fn print_sweep_summary(sweep: &SweepResult, r_star: f64) {
    println!(
        "{:>10} {:>4} {:>8} {:>8} {:>9} {:>22} {:>12} {:>10}",
        "L", "h", "trials", "errors", "censored", "error rate [95% CI]", "mean tau", "floor"
    );
    for c in &sweep.cells {
        let floor = if r_star.is_finite() && c.error_hi > 0.0 && c.error_hi < 0.5 {
            format!("{:.1}", lower_bound_expected_tau(r_star, c.error_hi))
        } else {
            "-".to_string()
        };
        println!(
            "{:>10} {:>4} {:>8} {:>8} {:>9} {:>9.4} [{:.4},{:.4}] {:>12.1} {:>10}",
            c.l,
            c.hypothesis,
            c.n_trials,
            c.n_errors,
            c.n_censored,
            c.error_rate,
            c.error_lo,
            c.error_hi,
            c.mean_tau,
            floor
        );
    }
}

fn cmd_drift(
    config_path: &Path,
    out: Option<&Path>,
    horizon: u64,
    seed: Option<u64>,
    lambda: Option<&Path>,
) -> Result<(), CmdError> {
    let (cfg, hash) = load(config_path)?;
    let instance = build_instance(&cfg)?;
    let cache = PairKlCache::new(&instance, cfg.sweep.d_cap_llr).map_err(runtime)?;
    let master_seed = seed.unwrap_or(cfg.sweep.master_seed);
    let table = match lambda {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CmdError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            PolicyTable::from_json(&text).map_err(runtime)?
        }
        None => PolicyTable::uniform(instance.n_arms(), cfg.solver.d_cap),
    };

    let mut reports = Vec::new();
    for h in 0..instance.n_arms() {
        let mdp = build_truncated_mdp(&instance, h, cfg.solver.d_cap).map_err(runtime)?;
        let report =
            drift_check(&instance, &mdp, &table, &cache, horizon, master_seed).map_err(runtime)?;
        println!("hypothesis {h} (horizon {horizon}):");
        for e in &report.entries {
            println!(
                "  vs h' = {}: empirical {:+.6}  predicted {:+.6}  rel err {:.2}%",
                e.alternative,
                e.empirical,
                e.predicted,
                100.0 * e.relative_error
            );
        }
        reports.push(report);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(runtime)?;
        let json = serde_json::to_string_pretty(&envelope(
            &hash,
            serde_json::json!({ "reports": reports }),
        ))
        .map_err(runtime)?;
        std::fs::write(dir.join("drift.json"), json).map_err(runtime)?;
        println!("wrote {}", dir.join("drift.json").display());
    }
    Ok(())
}
