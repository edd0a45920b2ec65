//! Monte-Carlo experiment runner: seeded sweeps over confidence levels and
//! hypotheses, drift checks against solver predictions, and slope reports.
//!
//! Trials are embarrassingly parallel; every trial's random streams derive
//! from `(master_seed, cell, trial)` alone, so sweeps are reproducible no
//! matter how many workers run them.

use crate::env::{BanditInstance, EnvState, Warmup};
use crate::llr::{LlrState, PairKlCache};
use crate::policy::{run_trial, PolicyParams, PolicyTable, TrialRecord};
use crate::rng::{self, stream_rng};
use crate::solver::TruncatedMdp;
use crate::tracker::DelayState;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("slope fit needs at least 3 confidence levels spanning 2 decades, got {0}")]
    InsufficientData(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
}

/// Aggregates for one `(L, hypothesis)` cell. Stopping-time statistics
/// exclude censored trials; error statistics count them as errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub l: f64,
    pub delta: f64,
    pub hypothesis: usize,
    pub n_trials: u64,
    pub n_errors: u64,
    pub n_censored: u64,
    pub error_rate: f64,
    pub error_lo: f64,
    pub error_hi: f64,
    pub mean_tau: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
}

/// Everything a sweep produced: per-cell aggregates plus the raw trial log.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<CellSummary>,
    pub records: Vec<TrialRecord>,
    /// Messages from trials that failed outright (none in normal operation).
    pub failures: Vec<String>,
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_985;
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Two-sided 97.5% Student-t critical values for df 1..=30; the normal value
/// beyond.
fn t_critical(df: u64) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
        2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
        2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        1..=30 => TABLE[(df - 1) as usize],
        _ => 1.959_963_985,
    }
}

/// Sample mean with a t-based 95% confidence interval.
pub fn mean_confidence_interval(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, f64::NEG_INFINITY, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = t_critical(xs.len() as u64 - 1) * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

fn summarize_cell(l: f64, delta: f64, hypothesis: usize, records: &[&TrialRecord]) -> CellSummary {
    let n_trials = records.len() as u64;
    let n_censored = records.iter().filter(|r| r.censored).count() as u64;
    // censored trials count as errors
    let n_errors = records.iter().filter(|r| !r.correct).count() as u64;
    let (error_lo, error_hi) = wilson_interval(n_errors, n_trials);
    let taus: Vec<f64> = records
        .iter()
        .filter(|r| !r.censored)
        .map(|r| r.tau as f64)
        .collect();
    let (mean_tau, tau_lo, tau_hi) = mean_confidence_interval(&taus);
    CellSummary {
        l,
        delta,
        hypothesis,
        n_trials,
        n_errors,
        n_censored,
        error_rate: if n_trials > 0 {
            n_errors as f64 / n_trials as f64
        } else {
            f64::NAN
        },
        error_lo,
        error_hi,
        mean_tau,
        tau_lo,
        tau_hi,
    }
}

/// Runs `trials_per_cell` trials for every `(params, hypothesis)` cell.
///
/// `tables[h]` is the sampling table used while hypothesis `h` leads. The
/// result is deterministic for a fixed `master_seed` regardless of
/// `parallelism`.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    instance: &BanditInstance,
    params_grid: &[PolicyParams],
    tables: &[PolicyTable],
    cache: &PairKlCache,
    trials_per_cell: u64,
    parallelism: Option<usize>,
    master_seed: u64,
    max_steps: u64,
    warmup: Warmup,
) -> Result<SweepResult, HarnessError> {
    let k = instance.n_arms();
    if tables.len() != k {
        return Err(HarnessError::Policy(
            crate::policy::PolicyError::MissingTables {
                expected: k,
                got: tables.len(),
            },
        ));
    }
    let n_cells = params_grid.len() * k;
    let total = n_cells as u64 * trials_per_cell;
    let job = |global: u64| -> Result<TrialRecord, String> {
        let cell = (global / trials_per_cell) as usize;
        let params = params_grid[cell / k];
        let hypothesis = cell % k;
        run_trial(
            instance,
            hypothesis,
            &params,
            tables,
            cache,
            master_seed,
            global,
            max_steps,
            warmup,
        )
        .map_err(|e| format!("trial {global}: {e}"))
    };

    let outcomes: Vec<Result<TrialRecord, String>> = match parallelism {
        Some(1) => (0..total).map(job).collect(),
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| HarnessError::Pool(e.to_string()))?;
            pool.install(|| {
                use rayon::prelude::*;
                (0..total).into_par_iter().map(job).collect()
            })
        }
        None => {
            use rayon::prelude::*;
            (0..total).into_par_iter().map(job).collect()
        }
    };

    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(msg) => failures.push(msg),
        }
    }

    let mut cells = Vec::with_capacity(n_cells);
    for (p_idx, params) in params_grid.iter().enumerate() {
        for hypothesis in 0..k {
            let cell = p_idx * k + hypothesis;
            let lo = cell as u64 * trials_per_cell;
            let hi = lo + trials_per_cell;
            let cell_records: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.trial_id >= lo && r.trial_id < hi)
                .collect();
            cells.push(summarize_cell(
                params.l,
                params.delta,
                hypothesis,
                &cell_records,
            ));
        }
    }
    Ok(SweepResult {
        cells,
        records,
        failures,
    })
}

/// Comparison of empirical LLR drifts against the truncated stationary-solve
/// prediction, per alternative hypothesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub hypothesis: usize,
    pub horizon: u64,
    pub entries: Vec<DriftEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftEntry {
    pub alternative: usize,
    pub empirical: f64,
    pub predicted: f64,
    pub relative_error: f64,
}

/// Simulates `horizon` ticks under the fixed table `lambda` (non-adaptive)
/// with hypothesis `h` true, and compares `Z_hh'(n)/n` to the drift predicted
/// by the stationary occupancy of the truncated closed-loop kernel.
pub fn drift_check(
    instance: &BanditInstance,
    mdp: &TruncatedMdp,
    lambda: &PolicyTable,
    cache: &PairKlCache,
    horizon: u64,
    master_seed: u64,
) -> Result<DriftReport, HarnessError> {
    let h = mdp.odd_arm();
    let k = instance.n_arms();
    let mut env_rng = stream_rng(master_seed, rng::stream::ENV_INIT, h as u64);
    let mut sim_rng = stream_rng(master_seed, rng::stream::DRIFT, h as u64);
    let mut env =
        EnvState::new(instance, h, &mut env_rng).map_err(crate::policy::PolicyError::from)?;
    let warm = env
        .warmup(instance, Warmup::Forced, &mut sim_rng)
        .map_err(crate::policy::PolicyError::from)?;
    let mut state = DelayState::after_round_robin(&warm);
    let mut llr = LlrState::new(k);
    for _ in 0..horizon {
        let intended = crate::env::sample_categorical(lambda.row_for(&state), &mut sim_rng);
        let rec = env.step(instance, intended, &mut sim_rng);
        llr.apply_step(cache, &state, rec.actual, rec.observation);
        state.update(rec.actual, rec.observation);
    }

    let nu = mdp.occupancy_of_policy(lambda, instance.eta(), 1e-13)?;
    let entries = (0..k)
        .filter(|&hp| hp != h)
        .map(|hp| {
            let empirical = llr.z(h, hp) / horizon as f64;
            let predicted = mdp.pair_drift(&nu, hp);
            DriftEntry {
                alternative: hp,
                empirical,
                predicted,
                relative_error: if predicted != 0.0 {
                    (empirical - predicted).abs() / predicted.abs()
                } else {
                    empirical.abs()
                },
            }
        })
        .collect();
    Ok(DriftReport {
        hypothesis: h,
        horizon,
        entries,
    })
}

/// Empirical `min_{h'} Z_hh'(n)/n` under purely uniform intended pulls: the
/// Monte-Carlo oracle for the `eta = 1` endpoint (at full trembling the
/// intended distribution is irrelevant).
pub fn uniform_drift_estimate(
    instance: &BanditInstance,
    odd_arm: usize,
    cache: &PairKlCache,
    horizon: u64,
    master_seed: u64,
) -> Result<f64, HarnessError> {
    let k = instance.n_arms();
    let mut env_rng = stream_rng(master_seed, rng::stream::ENV_INIT, odd_arm as u64);
    let mut sim_rng = stream_rng(master_seed, rng::stream::DRIFT, 1000 + odd_arm as u64);
    let mut env =
        EnvState::new(instance, odd_arm, &mut env_rng).map_err(crate::policy::PolicyError::from)?;
    let warm = env
        .warmup(instance, Warmup::Forced, &mut sim_rng)
        .map_err(crate::policy::PolicyError::from)?;
    let mut state = DelayState::after_round_robin(&warm);
    let mut llr = LlrState::new(k);
    for _ in 0..horizon {
        let intended = sim_rng.gen_range(0..k);
        let rec = env.step(instance, intended, &mut sim_rng);
        llr.apply_step(cache, &state, rec.actual, rec.observation);
        state.update(rec.actual, rec.observation);
    }
    Ok(llr.test_statistic(odd_arm) / horizon as f64)
}

/// Fitted slope of mean stopping time against `ln L`, with the acceptance
/// band `[lo_tol / r*, (1+delta) · hi_tol / r*]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeReport {
    pub slope: f64,
    pub intercept: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub in_band: bool,
    /// `(hypothesis, slope)` fitted per hypothesis.
    pub per_hypothesis: Vec<(usize, f64)>,
}

fn least_squares_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits mean tau against `ln L` pooled across hypotheses and checks the band
/// `[(1 - tol)/r*, (1 + tol)(1 + delta)/r*]`.
///
/// Needs at least 3 distinct values of `L` spanning at least two decades.
pub fn slope_report(
    sweep: &SweepResult,
    r_star: f64,
    delta: f64,
    tol: f64,
) -> Result<SlopeReport, HarnessError> {
    let mut ls: Vec<f64> = sweep.cells.iter().map(|c| c.l).collect();
    ls.sort_by(f64::total_cmp);
    ls.dedup_by(|a, b| a == b);
    if ls.len() < 3 {
        return Err(HarnessError::InsufficientData(format!(
            "{} distinct L values",
            ls.len()
        )));
    }
    let span = ls.last().unwrap() / ls.first().unwrap();
    if span < 99.999 {
        return Err(HarnessError::InsufficientData(format!(
            "L spans a factor of {span:.1} < 100"
        )));
    }

    // pooled mean tau per L, weighted by completed trials
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    for &l in &ls {
        let mut weight = 0.0;
        let mut total = 0.0;
        for c in sweep.cells.iter().filter(|c| c.l == l) {
            let w = (c.n_trials - c.n_censored) as f64;
            weight += w;
            total += w * c.mean_tau;
        }
        pooled.push((l.ln(), total / weight));
    }
    let (slope, intercept) = least_squares_slope(&pooled);

    let mut per_hypothesis = Vec::new();
    let hypotheses: Vec<usize> = {
        let mut hs: Vec<usize> = sweep.cells.iter().map(|c| c.hypothesis).collect();
        hs.sort_unstable();
        hs.dedup();
        hs
    };
    for h in hypotheses {
        let pts: Vec<(f64, f64)> = sweep
            .cells
            .iter()
            .filter(|c| c.hypothesis == h)
            .map(|c| (c.l.ln(), c.mean_tau))
            .collect();
        per_hypothesis.push((h, least_squares_slope(&pts).0));
    }

    let band_lo = (1.0 - tol) / r_star;
    let band_hi = (1.0 + tol) * (1.0 + delta) / r_star;
    Ok(SlopeReport {
        slope,
        intercept,
        band_lo,
        band_hi,
        in_band: slope >= band_lo && slope <= band_hi,
        per_hypothesis,
    })
}

/// Writes per-cell aggregates as CSV. `header_note` (config hash, version) is
/// embedded as a `#` comment so reruns are byte-comparable.
pub fn write_cells_csv<W: Write>(
    w: &mut W,
    cells: &[CellSummary],
    header_note: &str,
) -> io::Result<()> {
    writeln!(w, "# {header_note}")?;
    writeln!(
        w,
        "l,delta,hypothesis,n_trials,n_errors,n_censored,error_rate,error_lo,error_hi,mean_tau,tau_lo,tau_hi"
    )?;
    let mut sorted: Vec<&CellSummary> = cells.iter().collect();
    sorted.sort_by(|a, b| a.l.total_cmp(&b.l).then(a.hypothesis.cmp(&b.hypothesis)));
    for c in sorted {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.l,
            c.delta,
            c.hypothesis,
            c.n_trials,
            c.n_errors,
            c.n_censored,
            c.error_rate,
            c.error_lo,
            c.error_hi,
            c.mean_tau,
            c.tau_lo,
            c.tau_hi
        )?;
    }
    Ok(())
}

/// Writes one JSON object per trial (the verbose log).
pub fn write_trials_jsonl<W: Write>(w: &mut W, records: &[TrialRecord]) -> io::Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
