//! Stationary randomized sampling tables, the threshold stopping policy, and
//! the per-trial loop.
//!
//! The policy tracks `theta(n) = argmax_h M_h(n)` (ties at random), stops and
//! declares `theta(n)` once `M_{theta(n)}(n) >= ln((K-1)·L)`, and otherwise
//! pulls an arm drawn from that hypothesis's table row at the current
//! delay-capped state.

use crate::env::{BanditInstance, EnvError, EnvState, Warmup};
use crate::llr::{LlrState, PairKlCache};
use crate::rng::{self, stream_rng};
use crate::tracker::{DelayState, StateKey};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy table row for {0:?} is not a probability vector")]
    BadRow(StateKey),
    #[error("expected {expected} tables (one per hypothesis), got {got}")]
    MissingTables { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A conditional arm distribution per truncated `(d, i)` key, with a default
/// row for keys never stored (delays beyond the cap, unreached states). The
/// default is uniform, which preserves the exploration floor.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    n_arms: usize,
    d_cap: u32,
    rows: BTreeMap<StateKey, Vec<f64>>,
    default_row: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyTableFile {
    n_arms: usize,
    d_cap: u32,
    default_row: Vec<f64>,
    rows: Vec<PolicyRowFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRowFile {
    delays: Vec<u32>,
    states: Vec<usize>,
    probs: Vec<f64>,
}

fn is_distribution(v: &[f64]) -> bool {
    v.iter().all(|&p| p >= 0.0 && p.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

impl PolicyTable {
    /// Every row uniform: the baseline sampler.
    pub fn uniform(n_arms: usize, d_cap: u32) -> Self {
        Self {
            n_arms,
            d_cap,
            rows: BTreeMap::new(),
            default_row: vec![1.0 / n_arms as f64; n_arms],
        }
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn d_cap(&self) -> u32 {
        self.d_cap
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: StateKey, probs: Vec<f64>) -> Result<(), PolicyError> {
        if probs.len() != self.n_arms || !is_distribution(&probs) {
            return Err(PolicyError::BadRow(key));
        }
        self.rows.insert(key, probs);
        Ok(())
    }

    /// The row for a key, falling back to the default for unseen keys.
    pub fn row(&self, key: &StateKey) -> &[f64] {
        self.rows
            .get(key)
            .map(Vec::as_slice)
            .unwrap_or(&self.default_row)
    }

    /// The row for the current exact state, keyed with this table's own cap.
    pub fn row_for(&self, state: &DelayState) -> &[f64] {
        self.row(&state.capped_key(self.d_cap))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &Vec<f64>)> {
        self.rows.iter()
    }

    /// Serializes to the documented JSON schema: `n_arms`, `d_cap`,
    /// `default_row`, and a list of `{delays, states, probs}` entries sorted
    /// by key.
    pub fn to_json(&self) -> Result<String, PolicyError> {
        let file = PolicyTableFile {
            n_arms: self.n_arms,
            d_cap: self.d_cap,
            default_row: self.default_row.clone(),
            rows: self
                .rows
                .iter()
                .map(|(k, v)| PolicyRowFile {
                    delays: k.delays.clone(),
                    states: k.states.clone(),
                    probs: v.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyTableFile = serde_json::from_str(text)?;
        if !is_distribution(&file.default_row) || file.default_row.len() != file.n_arms {
            return Err(PolicyError::BadRow(StateKey {
                delays: vec![],
                states: vec![],
            }));
        }
        let mut table = PolicyTable {
            n_arms: file.n_arms,
            d_cap: file.d_cap,
            rows: BTreeMap::new(),
            default_row: file.default_row,
        };
        for row in file.rows {
            table.insert(
                StateKey {
                    delays: row.delays,
                    states: row.states,
                },
                row.probs,
            )?;
        }
        Ok(table)
    }
}

/// Stopping-policy parameters: confidence `L > 1` and optimality slack
/// `delta > 0`. The stop threshold is `ln((K-1)·L)`, derived exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyParams {
    pub l: f64,
    pub delta: f64,
}

impl PolicyParams {
    pub fn new(l: f64, delta: f64) -> Self {
        assert!(l > 1.0, "L must exceed 1");
        assert!(delta > 0.0, "delta must be positive");
        Self { l, delta }
    }

    pub fn threshold(&self, n_arms: usize) -> f64 {
        ((n_arms as f64 - 1.0) * self.l).ln()
    }
}

/// What the policy does at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Stop { declared: usize },
    Pull { intended: usize },
}

/// Mutable policy-side state across a trial. `declared` is set iff `stopped`.
#[derive(Debug, Clone, Default)]
pub struct PolicyState {
    pub current_guess: usize,
    pub stopped: bool,
    pub declared: Option<usize>,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Argmax over hypotheses of `M_h(n)` with uniform tie-breaking.
pub fn best_guess<R: Rng>(llr: &LlrState, rng: &mut R) -> usize {
    let k = llr.n_arms();
    let stats: Vec<f64> = (0..k).map(|h| llr.test_statistic(h)).collect();
    let best = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..k).filter(|&h| stats[h] == best).collect();
    ties[rng.gen_range(0..ties.len())]
}

/// One decision of the stopping policy: stop and declare if the leading
/// hypothesis clears the threshold, otherwise pull from its table.
pub fn choose_intended<T: std::borrow::Borrow<PolicyTable>, R: Rng>(
    ps: &mut PolicyState,
    llr: &LlrState,
    state: &DelayState,
    params: &PolicyParams,
    tables: &[T],
    rng: &mut R,
) -> Action {
    debug_assert!(!ps.stopped);
    let theta = best_guess(llr, rng);
    ps.current_guess = theta;
    if llr.test_statistic(theta) >= params.threshold(llr.n_arms()) {
        ps.stopped = true;
        ps.declared = Some(theta);
        return Action::Stop { declared: theta };
    }
    let row = tables[theta].borrow().row_for(state);
    let intended = crate::env::sample_categorical(row, rng);
    Action::Pull { intended }
}

/// How a trial ended. Censoring at `max_steps` is a result state, not an
/// error; censored trials count as errors in acceptance statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial_id: u64,
    pub hypothesis: usize,
    /// Stopping time in ticks, warm-up window included.
    pub tau: u64,
    pub declared: Option<usize>,
    pub correct: bool,
    pub censored: bool,
    /// `M_h` for every hypothesis at stoppage.
    pub final_stats: Vec<f64>,
    pub wall_ms: f64,
}

/// Runs one complete trial: warm-up, then decide/pull until the threshold is
/// crossed or `max_steps` ticks have elapsed. Identical
/// `(master_seed, trial_id)` pairs replay bit-exactly regardless of thread
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_trial<T: std::borrow::Borrow<PolicyTable>>(
    instance: &BanditInstance,
    odd_arm: usize,
    params: &PolicyParams,
    tables: &[T],
    cache: &PairKlCache,
    master_seed: u64,
    trial_id: u64,
    max_steps: u64,
    warmup: Warmup,
) -> Result<TrialRecord, PolicyError> {
    let k = instance.n_arms();
    if tables.len() != k {
        return Err(PolicyError::MissingTables {
            expected: k,
            got: tables.len(),
        });
    }
    let started = std::time::Instant::now();
    let mut env_rng = stream_rng(master_seed, rng::stream::ENV_INIT, trial_id);
    let mut trial_rng = stream_rng(master_seed, rng::stream::TRIAL, trial_id);
    let mut policy_rng = stream_rng(master_seed, rng::stream::POLICY, trial_id);

    let mut env = EnvState::new(instance, odd_arm, &mut env_rng)?;
    let warm = env.warmup(instance, warmup, &mut trial_rng)?;
    let mut state = DelayState::after_round_robin(&warm);
    let mut llr = LlrState::new(k);
    let mut ps = PolicyState::new();

    let record = |tau: u64, declared: Option<usize>, censored: bool, llr: &LlrState| TrialRecord {
        seed: master_seed,
        trial_id,
        hypothesis: odd_arm,
        tau,
        declared,
        correct: declared == Some(odd_arm) && !censored,
        censored,
        final_stats: (0..k).map(|h| llr.test_statistic(h)).collect(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };

    let mut ticks = env.clock();
    loop {
        match choose_intended(&mut ps, &llr, &state, params, tables, &mut policy_rng) {
            Action::Stop { declared } => {
                return Ok(record(ticks, Some(declared), false, &llr));
            }
            Action::Pull { intended } => {
                let rec = env.step(instance, intended, &mut trial_rng);
                llr.apply_step(cache, &state, rec.actual, rec.observation);
                state.update(rec.actual, rec.observation);
                ticks += 1;
                if ticks >= max_steps {
                    return Ok(record(ticks, None, true, &llr));
                }
            }
        }
    }
}
