//! The optimal-drift constant `r*` via occupancy-measure linear programming
//! on a delay-truncated state space.
//!
//! For a designated odd arm `h`, the program maximizes the worst-case drift
//!
//! ```text
//!   max  min_{h' != h}  sum_{(d,i),a} nu(d,i,a) · k_hh'(d,i,a)
//! ```
//!
//! over state-action occupancy measures `nu` subject to the global balance
//! equations of the controlled chain, total mass one, nonnegativity, and the
//! trembling-hand floor `nu(d,i,a) >= (eta/K) · sum_a' nu(d,i,a')`. The floor
//! keeps the program linear in `nu` while restricting conditional arm
//! frequencies to the trembled class. Arm delays are capped at `D`: a delay
//! coordinate stores `min(d, D)` and the capped coordinate uses the `D`-step
//! transition law, the same capped powers the LLR tables use.
//!
//! The per-pair reward is
//!
//! ```text
//!   k_hh'(d,i,a) = D(P1^{d_a}(·|i_a) ‖ P2^{d_a}(·|i_a))   if a = h
//!                  D(P2^{d_a}(·|i_a) ‖ P1^{d_a}(·|i_a))   if a = h'
//!                  0                                       otherwise
//! ```
//!
//! The default route solves the epigraph LP exactly with a revised-simplex
//! backend; [`subgradient`] holds a dependency-free approximate fallback.
//! Whether the untruncated supremum is attained by any stationary strategy is
//! unknown, so results always carry the achieved per-alternative certificate
//! rather than any optimality claim beyond the truncated program.

pub mod subgradient;

use crate::env::BanditInstance;
use crate::markov::{kl_divergence, PowerCache};
use crate::policy::PolicyTable;
use crate::tracker::{OccupancyMeasure, StateKey};
use minilp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Mass below which a state is treated as unvisited during policy extraction.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("delay cap {d_cap} is smaller than the number of arms {n_arms}")]
    CapTooSmall { d_cap: u32, n_arms: usize },
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("reward k(d={d}, i={i}) is infinite; the instance violates the support assumption")]
    InfiniteReward { d: u32, i: usize },
    #[error("eta grid must be sorted ascending within (0, 1]")]
    BadEtaGrid,
    #[error("eta must lie in [0, 1], got {0}")]
    BadEta(f64),
    #[error("stationary solve did not converge within {0} iterations")]
    StationaryDiverged(u64),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// The delay-truncated controlled Markov decision process for one designated
/// odd arm: enumerated reachable states, the kernel under actual pulls, and
/// the per-pair divergence rewards.
#[derive(Debug, Clone)]
pub struct TruncatedMdp {
    n_arms: usize,
    d_cap: u32,
    odd_arm: usize,
    states: Vec<StateKey>,
    index: HashMap<StateKey, usize>,
    /// `kernel[s * K + a]` lists `(next_state_index, probability)`.
    kernel: Vec<Vec<(usize, f64)>>,
    /// `D(P1^{d_h}(·|i_h) ‖ P2^{d_h}(·|i_h))` per state.
    r_odd: Vec<f64>,
    /// `r_alt[s * K + a] = D(P2^{d_a}(·|i_a) ‖ P1^{d_a}(·|i_a))` for `a != h`.
    r_alt: Vec<f64>,
}

impl TruncatedMdp {
    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn d_cap(&self) -> u32 {
        self.d_cap
    }

    pub fn odd_arm(&self) -> usize {
        self.odd_arm
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[StateKey] {
        &self.states
    }

    pub fn state_index(&self, key: &StateKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// `k_hh'(s, a)` for the alternative `hp`.
    pub fn reward(&self, s: usize, a: usize, hp: usize) -> f64 {
        if a == self.odd_arm {
            self.r_odd[s]
        } else if a == hp {
            self.r_alt[s * self.n_arms + a]
        } else {
            0.0
        }
    }

    /// Transition list for `(s, a)` under actual pulls.
    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.kernel[s * self.n_arms + a]
    }

    /// Drift toward alternative `hp` of an indexed occupancy vector.
    pub fn pair_drift(&self, nu: &[f64], hp: usize) -> f64 {
        let k = self.n_arms;
        let h = self.odd_arm;
        let mut total = 0.0;
        for s in 0..self.states.len() {
            total += nu[s * k + h] * self.r_odd[s];
            if hp != h {
                total += nu[s * k + hp] * self.r_alt[s * k + hp];
            }
        }
        total
    }

    /// Worst-case drift `min_{h' != h}` of an indexed occupancy vector.
    pub fn min_drift(&self, nu: &[f64]) -> f64 {
        (0..self.n_arms)
            .filter(|&hp| hp != self.odd_arm)
            .map(|hp| self.pair_drift(nu, hp))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest violation of the balance equations plus the mass defect, for
    /// an indexed occupancy vector.
    pub fn balance_residual(&self, nu: &[f64]) -> f64 {
        let k = self.n_arms;
        let n = self.states.len();
        let mut inflow = vec![0.0; n];
        for s in 0..n {
            for a in 0..k {
                let mass = nu[s * k + a];
                if mass == 0.0 {
                    continue;
                }
                for &(t, p) in self.transitions(s, a) {
                    inflow[t] += mass * p;
                }
            }
        }
        let mut worst = 0.0f64;
        for s in 0..n {
            let outflow: f64 = (0..k).map(|a| nu[s * k + a]).sum();
            worst = worst.max((outflow - inflow[s]).abs());
        }
        let mass: f64 = nu.iter().sum();
        worst.max((mass - 1.0).abs())
    }

    /// Converts an indexed occupancy vector into the keyed public form.
    pub fn to_occupancy_measure(&self, nu: &[f64]) -> OccupancyMeasure {
        let k = self.n_arms;
        let mut map = HashMap::new();
        for (s, key) in self.states.iter().enumerate() {
            for a in 0..k {
                let m = nu[s * k + a];
                if m > 0.0 {
                    map.insert((key.clone(), a), m);
                }
            }
        }
        OccupancyMeasure::from_map(map)
    }

    /// The conditional pull distribution actually exercised at a state when
    /// intending by `table` under trembling `eta`. Keys are re-capped with the
    /// table's own delay cap, so tables built at a smaller cap stay usable.
    fn trembled_row(&self, table: &PolicyTable, key: &StateKey, eta: f64) -> Vec<f64> {
        let k = self.n_arms;
        let row = if table.d_cap() < self.d_cap {
            let recapped = StateKey {
                delays: key.delays.iter().map(|&d| d.min(table.d_cap())).collect(),
                states: key.states.clone(),
            };
            table.row(&recapped).to_vec()
        } else {
            table.row(key).to_vec()
        };
        row.iter()
            .map(|&l| eta / k as f64 + (1.0 - eta) * l)
            .collect()
    }

    /// Stationary distribution over truncated states of the closed-loop chain
    /// driven by `table` through the trembling channel. Power iteration to
    /// `tol` in sup norm.
    pub fn closed_loop_stationary(
        &self,
        table: &PolicyTable,
        eta: f64,
        tol: f64,
    ) -> Result<Vec<f64>, SolverError> {
        let n = self.states.len();
        let rows: Vec<Vec<f64>> = self
            .states
            .iter()
            .map(|key| self.trembled_row(table, key, eta))
            .collect();
        let mut mu = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        let max_iters: u64 = 200_000;
        for _ in 0..max_iters {
            for x in next.iter_mut() {
                *x = 0.0;
            }
            for (s, &m) in mu.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                for (a, &lam) in rows[s].iter().enumerate() {
                    let w = m * lam;
                    if w == 0.0 {
                        continue;
                    }
                    for &(t, p) in self.transitions(s, a) {
                        next[t] += w * p;
                    }
                }
            }
            let total: f64 = next.iter().sum();
            for x in next.iter_mut() {
                *x /= total;
            }
            let err = mu
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            std::mem::swap(&mut mu, &mut next);
            if err <= tol {
                return Ok(mu);
            }
        }
        Err(SolverError::StationaryDiverged(max_iters))
    }

    /// The occupancy vector `nu^lambda(s, a) = mu(s) · (eta/K + (1-eta) λ(a|s))`
    /// induced by an intended-pull table.
    pub fn occupancy_of_policy(
        &self,
        table: &PolicyTable,
        eta: f64,
        tol: f64,
    ) -> Result<Vec<f64>, SolverError> {
        let mu = self.closed_loop_stationary(table, eta, tol)?;
        let k = self.n_arms;
        let mut nu = vec![0.0; self.states.len() * k];
        for (s, key) in self.states.iter().enumerate() {
            let row = self.trembled_row(table, key, eta);
            for a in 0..k {
                nu[s * k + a] = mu[s] * row[a];
            }
        }
        Ok(nu)
    }

    /// Recovers the intended-pull table from an occupancy vector via
    /// `eta/K + (1-eta) λ(a|d,i) = nu(d,i,a) / sum_a' nu(d,i,a')`. States with
    /// at most [`MASS_FLOOR`] mass keep the uniform default row; tiny negative
    /// artifacts are clipped and the row renormalized. At `eta = 1` every
    /// intended distribution acts identically, so rows fall back to uniform.
    pub fn extract_policy(&self, nu: &[f64], eta: f64) -> Result<PolicyTable, SolverError> {
        let k = self.n_arms;
        let mut table = PolicyTable::uniform(k, self.d_cap);
        if eta >= 1.0 {
            return Ok(table);
        }
        for (s, key) in self.states.iter().enumerate() {
            let mass: f64 = (0..k).map(|a| nu[s * k + a]).sum();
            if mass <= MASS_FLOOR {
                continue;
            }
            let mut row: Vec<f64> = (0..k)
                .map(|a| {
                    let cond = nu[s * k + a] / mass;
                    ((cond - eta / k as f64) / (1.0 - eta)).max(0.0)
                })
                .collect();
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                continue;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
            table.insert(key.clone(), row)?;
        }
        Ok(table)
    }
}

/// Builds the truncated MDP for hypothesis `h` with delay cap `d_cap`.
///
/// States are enumerated by closure from every possible post-warm-up state
/// (delays `(K, K-1, ..., 1)`, all last-state combinations), so the set is
/// exactly what the capped dynamics can reach. Errors with `CapTooSmall` when
/// `d_cap < K`, since the post-warm-up state itself would not be
/// representable.
pub fn build_truncated_mdp(
    instance: &BanditInstance,
    odd_arm: usize,
    d_cap: u32,
) -> Result<TruncatedMdp, SolverError> {
    let k = instance.n_arms();
    let s_chain = instance.n_states();
    if (d_cap as usize) < k {
        return Err(SolverError::CapTooSmall { d_cap, n_arms: k });
    }
    let p1_pows = PowerCache::new(instance.p1().clone(), d_cap);
    let p2_pows = PowerCache::new(instance.p2().clone(), d_cap);
    let pows_for = |arm: usize| if arm == odd_arm { &p1_pows } else { &p2_pows };

    // seed states: warm-up delays with every last-state combination
    let warm_delays: Vec<u32> = (0..k).map(|a| (k - a) as u32).collect();
    let mut states: Vec<StateKey> = Vec::new();
    let mut index: HashMap<StateKey, usize> = HashMap::new();
    let mut queue: Vec<usize> = Vec::new();
    for combo in 0..s_chain.pow(k as u32) {
        let mut rest = combo;
        let mut last = vec![0usize; k];
        for slot in last.iter_mut() {
            *slot = rest % s_chain;
            rest /= s_chain;
        }
        let key = StateKey {
            delays: warm_delays.clone(),
            states: last,
        };
        let idx = states.len();
        index.insert(key.clone(), idx);
        states.push(key);
        queue.push(idx);
    }

    let mut kernel: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut cursor = 0usize;
    while cursor < queue.len() {
        let s = queue[cursor];
        cursor += 1;
        let key = states[s].clone();
        debug_assert_eq!(kernel.len(), s * k);
        for a in 0..k {
            let d_a = key.delays[a];
            let i_a = key.states[a];
            let row = pows_for(a).power(d_a).row(i_a).to_vec();
            let mut list = Vec::new();
            let mut total = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                total += p;
                let mut next_delays: Vec<u32> =
                    key.delays.iter().map(|&d| (d + 1).min(d_cap)).collect();
                next_delays[a] = 1;
                let mut next_states = key.states.clone();
                next_states[a] = j;
                let next_key = StateKey {
                    delays: next_delays,
                    states: next_states,
                };
                let t = match index.get(&next_key) {
                    Some(&t) => t,
                    None => {
                        let t = states.len();
                        index.insert(next_key.clone(), t);
                        states.push(next_key);
                        queue.push(t);
                        t
                    }
                };
                list.push((t, p));
            }
            if (total - 1.0).abs() > 1e-10 {
                return Err(SolverError::NumericalFailure(format!(
                    "kernel row for state {s} action {a} sums to {total}"
                )));
            }
            kernel.push(list);
        }
    }

    // rewards from the same capped powers
    let mut r_odd = vec![0.0; states.len()];
    let mut r_alt = vec![0.0; states.len() * k];
    for (s, key) in states.iter().enumerate() {
        let d_h = key.delays[odd_arm];
        let i_h = key.states[odd_arm];
        let fwd = kl_divergence(p1_pows.power(d_h).row(i_h), p2_pows.power(d_h).row(i_h))
            .map_err(|e| SolverError::NumericalFailure(e.to_string()))?;
        if !fwd.is_finite() {
            return Err(SolverError::InfiniteReward { d: d_h, i: i_h });
        }
        r_odd[s] = fwd;
        for a in 0..k {
            if a == odd_arm {
                continue;
            }
            let d_a = key.delays[a];
            let i_a = key.states[a];
            let rev = kl_divergence(p2_pows.power(d_a).row(i_a), p1_pows.power(d_a).row(i_a))
                .map_err(|e| SolverError::NumericalFailure(e.to_string()))?;
            if !rev.is_finite() {
                return Err(SolverError::InfiniteReward { d: d_a, i: i_a });
            }
            r_alt[s * k + a] = rev;
        }
    }

    Ok(TruncatedMdp {
        n_arms: k,
        d_cap,
        odd_arm,
        states,
        index,
        kernel,
        r_odd,
        r_alt,
    })
}

/// Output of a solve: the optimal value, the optimizing occupancy measure,
/// the extracted intended-pull table, and the achieved per-alternative
/// certificate.
#[derive(Debug, Clone)]
pub struct SolverResult {
    pub r_star: f64,
    pub nu: OccupancyMeasure,
    pub lambda: PolicyTable,
    pub eta: f64,
    pub d_cap: u32,
    pub odd_arm: usize,
    /// `(h', achieved drift toward h')` for every alternative, each at least
    /// `r_star` up to solver tolerance.
    pub certificate: Vec<(usize, f64)>,
    /// Largest balance-equation or mass violation of `nu`.
    pub residual: f64,
    /// How the result was produced (`"simplex"` or `"subgradient"`).
    pub method: &'static str,
}

/// Serialized form written by the CLI.
#[derive(Debug, Serialize, Deserialize)]
pub struct SolverResultFile {
    pub r_star: f64,
    pub eta: f64,
    pub d_cap: u32,
    pub odd_arm: usize,
    pub certificate: Vec<(usize, f64)>,
    pub residual: f64,
    pub method: String,
    pub n_states: usize,
    pub lambda_file: String,
}

impl SolverResult {
    pub fn to_file(&self, n_states: usize, lambda_file: String) -> SolverResultFile {
        SolverResultFile {
            r_star: self.r_star,
            eta: self.eta,
            d_cap: self.d_cap,
            odd_arm: self.odd_arm,
            certificate: self.certificate.clone(),
            residual: self.residual,
            method: self.method.to_string(),
            n_states,
            lambda_file,
        }
    }
}

/// Solves the truncated occupancy LP exactly.
///
/// The trembling floor `nu(s,a) >= (eta/K) sum_a' nu(s,a')` is encoded by the
/// linear change of variables `nu(s,a) = (eta/K) sum_a' x(s,a') +
/// (1-eta) x(s,a)` with `x >= 0`, a bijection onto the floored measures that
/// keeps the simplex basis well-conditioned (explicit floor rows are
/// degenerate en masse). Balance, normalization, and the epigraph rows are
/// expressed over `x`; the returned measure is the recovered `nu`, whose
/// residuals are re-verified against `tol`.
pub fn solve_rstar(mdp: &TruncatedMdp, eta: f64, tol: f64) -> Result<SolverResult, SolverError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SolverError::BadEta(eta));
    }
    let k = mdp.n_arms;
    let h = mdp.odd_arm;
    let n = mdp.states.len();
    let frac = eta / k as f64;
    let keep = 1.0 - eta;

    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let t = problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    let x_vars: Vec<Variable> = (0..n * k)
        .map(|_| problem.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();

    // epigraph: sum nu·k_hh' - t >= 0 for each alternative, in x coordinates:
    // coefficient of x(s,b) is (eta/K)(k(s,h,h') + k(s,h',h')) + (1-eta) k(s,b,h')
    for hp in (0..k).filter(|&hp| hp != h) {
        let mut terms: Vec<(Variable, f64)> = vec![(t, -1.0)];
        for s in 0..n {
            let pair_total = mdp.r_odd[s] + mdp.r_alt[s * k + hp];
            for b in 0..k {
                let direct = if b == h {
                    mdp.r_odd[s]
                } else if b == hp {
                    mdp.r_alt[s * k + hp]
                } else {
                    0.0
                };
                let c = frac * pair_total + keep * direct;
                if c != 0.0 {
                    terms.push((x_vars[s * k + b], c));
                }
            }
        }
        problem.add_constraint(&terms, ComparisonOp::Ge, 0.0);
    }

    // balance: outflow of s' equals inflow of s'. In x coordinates the
    // outflow is sum_a x(s',a) and the inflow coefficient of x(s,b) is
    // (1-eta) Q(s'|s,b) + (eta/K) sum_a Q(s'|s,a). The final row is implied
    // by the others plus normalization, so it is dropped.
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for s in 0..n {
        for a in 0..k {
            for &(target, p) in mdp.transitions(s, a) {
                incoming[target].push((s * k + a, p));
            }
        }
    }
    for (sp, inflow) in incoming.iter().enumerate().take(n.saturating_sub(1)) {
        let mut coeff: HashMap<usize, f64> = HashMap::new();
        for a in 0..k {
            coeff.insert(sp * k + a, 1.0);
        }
        for &(flat, p) in inflow {
            let s = flat / k;
            // direct term
            *coeff.entry(flat).or_insert(0.0) -= keep * p;
            // trembled spread over intended arms of the same source state
            for b in 0..k {
                *coeff.entry(s * k + b).or_insert(0.0) -= frac * p;
            }
        }
        let terms: Vec<(Variable, f64)> = coeff
            .into_iter()
            .filter(|&(_, c)| c.abs() > 1e-15)
            .map(|(flat, c)| (x_vars[flat], c))
            .collect();
        problem.add_constraint(&terms, ComparisonOp::Eq, 0.0);
    }

    // normalization: total x mass equals total nu mass equals one
    let ones: Vec<(Variable, f64)> = x_vars.iter().map(|&v| (v, 1.0)).collect();
    problem.add_constraint(&ones, ComparisonOp::Eq, 1.0);

    let solution = problem.solve().map_err(|e| match e {
        minilp::Error::Infeasible => SolverError::Infeasible,
        minilp::Error::Unbounded => SolverError::NumericalFailure("LP reported unbounded".into()),
    })?;

    let mut nu = vec![0.0; n * k];
    for s in 0..n {
        let mass: f64 = (0..k).map(|b| solution[x_vars[s * k + b]].max(0.0)).sum();
        for a in 0..k {
            nu[s * k + a] = frac * mass + keep * solution[x_vars[s * k + a]].max(0.0);
        }
    }
    finish_result(mdp, eta, tol, nu, "simplex")
}

/// Validates a candidate occupancy vector and assembles the result struct.
pub(crate) fn finish_result(
    mdp: &TruncatedMdp,
    eta: f64,
    tol: f64,
    nu: Vec<f64>,
    method: &'static str,
) -> Result<SolverResult, SolverError> {
    let residual = mdp.balance_residual(&nu);
    if method == "simplex" && residual > tol.max(1e-8) {
        return Err(SolverError::NumericalFailure(format!(
            "balance residual {residual} exceeds tolerance"
        )));
    }
    let certificate: Vec<(usize, f64)> = (0..mdp.n_arms)
        .filter(|&hp| hp != mdp.odd_arm)
        .map(|hp| (hp, mdp.pair_drift(&nu, hp)))
        .collect();
    let r_star = certificate
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::INFINITY, f64::min);
    let lambda = mdp.extract_policy(&nu, eta)?;
    Ok(SolverResult {
        r_star,
        nu: mdp.to_occupancy_measure(&nu),
        lambda,
        eta,
        d_cap: mdp.d_cap,
        odd_arm: mdp.odd_arm,
        certificate,
        residual,
        method,
    })
}

/// The weaker single-arm bound: the truncated form of the per-arm linear
/// program whose variables `kappa(d, i, a)` are joint delay / last-state /
/// arm frequencies. In the untruncated program every arm's delay runs tile
/// the timeline, giving `sum_{d,i} d·kappa(d,i,a) = 1` per arm; with delays
/// capped at `d_cap` the recorded sum can only undercount elapsed time, so
/// the faithful capped constraint is `sum_{d,i} d·kappa(d,i,a) <= 1`. Every
/// capped occupancy measure maps into this feasible set, which is what makes
/// the value dominate the occupancy-LP optimum at the same cap. (The equality
/// form loses that dominance for small caps: it charges the full budget at
/// the top delay bucket that the capped dynamics get for free.)
pub fn solve_r1star(
    instance: &BanditInstance,
    odd_arm: usize,
    d_cap: u32,
) -> Result<f64, SolverError> {
    let k = instance.n_arms();
    let s_chain = instance.n_states();
    if d_cap < 1 {
        return Err(SolverError::CapTooSmall { d_cap, n_arms: 1 });
    }
    let p1_pows = PowerCache::new(instance.p1().clone(), d_cap);
    let p2_pows = PowerCache::new(instance.p2().clone(), d_cap);

    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let t = problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    // kappa[(d-1) * s_chain * k + i * k + a]
    let kappa: Vec<Variable> = (0..d_cap as usize * s_chain * k)
        .map(|_| problem.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();
    let idx = |d: u32, i: usize, a: usize| ((d - 1) as usize * s_chain + i) * k + a;

    for hp in (0..k).filter(|&hp| hp != odd_arm) {
        let mut terms: Vec<(Variable, f64)> = vec![(t, -1.0)];
        for d in 1..=d_cap {
            for i in 0..s_chain {
                let fwd = kl_divergence(p1_pows.power(d).row(i), p2_pows.power(d).row(i))
                    .map_err(|e| SolverError::NumericalFailure(e.to_string()))?;
                let rev = kl_divergence(p2_pows.power(d).row(i), p1_pows.power(d).row(i))
                    .map_err(|e| SolverError::NumericalFailure(e.to_string()))?;
                if !fwd.is_finite() || !rev.is_finite() {
                    return Err(SolverError::InfiniteReward { d, i });
                }
                terms.push((kappa[idx(d, i, odd_arm)], fwd));
                terms.push((kappa[idx(d, i, hp)], rev));
            }
        }
        problem.add_constraint(&terms, ComparisonOp::Ge, 0.0);
    }

    for a in 0..k {
        let mut terms: Vec<(Variable, f64)> = Vec::new();
        for d in 1..=d_cap {
            for i in 0..s_chain {
                terms.push((kappa[idx(d, i, a)], d as f64));
            }
        }
        problem.add_constraint(&terms, ComparisonOp::Le, 1.0);
    }

    let ones: Vec<(Variable, f64)> = kappa.iter().map(|&v| (v, 1.0)).collect();
    problem.add_constraint(&ones, ComparisonOp::Eq, 1.0);

    let solution = problem.solve().map_err(|e| match e {
        minilp::Error::Infeasible => SolverError::Infeasible,
        minilp::Error::Unbounded => SolverError::NumericalFailure("LP reported unbounded".into()),
    })?;
    Ok(solution.objective())
}

/// `r*` across an ascending eta grid.
///
/// A distribution with floor `eta/K` also respects any smaller floor, so the
/// feasible class only grows as eta decreases and the returned values are
/// non-increasing in eta up to LP tolerance. Whether the zero-floor limit is
/// approached continuously is not settled; this only evaluates the grid.
pub fn rstar_eta_curve(
    instance: &BanditInstance,
    odd_arm: usize,
    d_cap: u32,
    etas: &[f64],
    tol: f64,
) -> Result<Vec<(f64, f64)>, SolverError> {
    let ascending = etas.windows(2).all(|w| w[0] < w[1]);
    if etas.is_empty() || !ascending || etas.iter().any(|&e| !(0.0 < e && e <= 1.0)) {
        return Err(SolverError::BadEtaGrid);
    }
    let mdp = build_truncated_mdp(instance, odd_arm, d_cap)?;
    etas.iter()
        .map(|&eta| solve_rstar(&mdp, eta, tol).map(|r| (eta, r.r_star)))
        .collect()
}

/// `d(epsilon, 1-epsilon) / r*`: a floor on the expected stopping time of any
/// epsilon-correct policy for this instance.
pub fn lower_bound_expected_tau(r_star: f64, epsilon: f64) -> f64 {
    assert!(
        epsilon > 0.0 && epsilon < 0.5,
        "epsilon must lie in (0, 1/2)"
    );
    assert!(r_star > 0.0, "r_star must be positive");
    crate::markov::binary_relative_entropy(epsilon, 1.0 - epsilon).expect("valid domain") / r_star
}

/// Closed-form grid oracle for iid instances (every row of `P1` equals `nu1`,
/// every row of `P2` equals `nu2`): evaluates
///
/// ```text
///   (eta/K)(D(nu1‖nu2) + D(nu2‖nu1))
///     + (1-eta)·(λ(h) D(nu1‖nu2) + min_{h'≠h} λ(h') D(nu2‖nu1))
/// ```
///
/// over the K-simplex grid with the given step. The non-odd coordinates enter
/// only through their minimum, and for a fixed on-grid `λ(h)` the largest
/// on-grid minimum is `floor(remaining/(K-1))` grid units, so scanning that
/// reduced profile visits exactly the full grid's maxima.
pub fn iid_grid_oracle(nu1: &[f64], nu2: &[f64], k: usize, eta: f64, step: f64) -> f64 {
    let a = kl_divergence(nu1, nu2).expect("same length");
    let b = kl_divergence(nu2, nu1).expect("same length");
    let n = (1.0 / step).round() as u64;
    let base = eta / k as f64 * (a + b);
    let mut best = f64::NEG_INFINITY;
    for m in 0..=n {
        let lam_h = m as f64 * step;
        let min_other = ((n - m) / (k as u64 - 1)) as f64 * step;
        let value = base + (1.0 - eta) * (lam_h * a + min_other * b);
        if value > best {
            best = value;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::TransitionMatrix;
    use crate::rng::{stream, stream_rng};
    use rand::Rng;

    fn canonical() -> BanditInstance {
        let p1 = TransitionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let p2 = TransitionMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        BanditInstance::new(3, p1, p2, 0.1, None).unwrap()
    }

    fn iid_symmetric() -> BanditInstance {
        let p1 = TransitionMatrix::from_rows(vec![vec![0.8, 0.2], vec![0.8, 0.2]]).unwrap();
        let p2 = TransitionMatrix::from_rows(vec![vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        BanditInstance::new(3, p1, p2, 0.1, None).unwrap()
    }

    #[test]
    fn three_state_instance_solves_end_to_end() {
        // nothing in the pipeline may assume a binary state space
        let p1 = TransitionMatrix::from_rows(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.2, 0.5],
        ])
        .unwrap();
        let p2 = TransitionMatrix::from_rows(vec![
            vec![0.4, 0.4, 0.2],
            vec![0.3, 0.4, 0.3],
            vec![0.2, 0.3, 0.5],
        ])
        .unwrap();
        let inst = BanditInstance::new(3, p1, p2, 0.2, None).unwrap();
        let values: Vec<f64> = (0..3)
            .map(|h| {
                let mdp = build_truncated_mdp(&inst, h, 3).unwrap();
                let res = solve_rstar(&mdp, inst.eta(), 1e-8).unwrap();
                assert!(res.residual < 1e-8);
                res.r_star
            })
            .collect();
        assert!(values[0] > 0.0);
        for w in values.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-8, "{values:?}");
        }
        let r1 = solve_r1star(&inst, 0, 3).unwrap();
        assert!(r1 >= values[0] - 1e-9);
    }

    #[test]
    fn cap_too_small_is_rejected() {
        let inst = canonical();
        assert!(matches!(
            build_truncated_mdp(&inst, 0, 2),
            Err(SolverError::CapTooSmall { .. })
        ));
    }

    #[test]
    fn truncated_mdp_shape_and_stochastic_rows() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 3).unwrap();
        // K·S^K·D^{K-1} bound from the construction
        assert!(mdp.n_states() <= 3 * 8 * 9);
        for s in 0..mdp.n_states() {
            for a in 0..3 {
                let total: f64 = mdp.transitions(s, a).iter().map(|&(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
        // rewards vanish off the hypothesis pair
        for s in 0..mdp.n_states() {
            assert_eq!(mdp.reward(s, 1, 2), 0.0);
            assert_eq!(mdp.reward(s, 2, 1), 0.0);
            assert!(mdp.reward(s, 0, 1) >= 0.0);
        }
    }

    #[test]
    fn delay_one_unique_in_every_enumerated_state() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 1, 4).unwrap();
        for key in mdp.states() {
            assert_eq!(key.delays.iter().filter(|&&d| d == 1).count(), 1);
            assert!(key.delays.iter().all(|&d| d <= 4));
        }
    }

    #[test]
    fn solve_canonical_instance() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let res = solve_rstar(&mdp, 0.1, 1e-8).unwrap();
        assert!(res.r_star > 0.0);
        assert!(res.residual < 1e-8);
        // certificate entries are at least r_star, with equality at the min
        let min_cert = res
            .certificate
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        assert!((min_cert - res.r_star).abs() < 1e-8);
        for &(_, v) in &res.certificate {
            assert!(v >= res.r_star - 1e-8);
        }
    }

    #[test]
    fn rstar_does_not_depend_on_designated_arm() {
        let inst = canonical();
        let values: Vec<f64> = (0..3)
            .map(|h| {
                let mdp = build_truncated_mdp(&inst, h, 4).unwrap();
                solve_rstar(&mdp, 0.1, 1e-8).unwrap().r_star
            })
            .collect();
        for w in values.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-8, "{values:?}");
        }
    }

    #[test]
    fn eta_one_forces_uniform_conditionals() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let res = solve_rstar(&mdp, 1.0, 1e-8).unwrap();
        // every state's conditional pull distribution is uniform
        let marginal = res.nu.state_marginal();
        for (key, m) in marginal {
            if m < 1e-10 {
                continue;
            }
            for a in 0..3 {
                let cond = res.nu.mass(&key, a) / m;
                assert!(
                    (cond - 1.0 / 3.0).abs() < 1e-7,
                    "state {key:?} arm {a}: {cond}"
                );
            }
        }
    }

    #[test]
    fn iid_instance_matches_grid_oracle() {
        let inst = iid_symmetric();
        let mdp = build_truncated_mdp(&inst, 0, 3).unwrap();
        let res = solve_rstar(&mdp, 0.1, 1e-8).unwrap();
        let grid = iid_grid_oracle(&[0.8, 0.2], &[0.2, 0.8], 3, 0.1, 1e-4);
        assert!(
            (res.r_star - grid).abs() < 1e-6,
            "lp {} vs grid {}",
            res.r_star,
            grid
        );
        // closed form for the symmetric case: vertex optimum
        let a = kl_divergence(&[0.8, 0.2], &[0.2, 0.8]).unwrap();
        let closed = 0.1 / 3.0 * 2.0 * a + 0.9 * a;
        assert!((grid - closed).abs() < 1e-12);
    }

    #[test]
    fn r1star_dominates_rstar() {
        let inst = canonical();
        for d in [4u32, 6] {
            let mdp = build_truncated_mdp(&inst, 0, d).unwrap();
            let r = solve_rstar(&mdp, 0.1, 1e-8).unwrap().r_star;
            let r1 = solve_r1star(&inst, 0, d).unwrap();
            assert!(r1 >= r - 1e-9, "D={d}: r1*={r1} < r*={r}");
        }
    }

    #[test]
    fn r1star_concentrates_on_the_best_delay_one_cell() {
        // with vanishing-mass tails allowed, the per-arm program's supremum
        // is the largest single-cell divergence; here kl1(d=1, i=0)
        let inst = canonical();
        let best = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        for d in [1u32, 4, 8] {
            let r1 = solve_r1star(&inst, 0, d).unwrap();
            assert!((r1 - best).abs() < 1e-9, "D={d}: {r1} vs {best}");
        }
        assert!(matches!(
            solve_r1star(&inst, 0, 0),
            Err(SolverError::CapTooSmall { .. })
        ));
    }

    #[test]
    fn eta_curve_is_monotone_and_validated() {
        let inst = canonical();
        let curve = rstar_eta_curve(&inst, 0, 4, &[0.1, 0.5, 1.0], 1e-8).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve[0].1 >= curve[1].1 - 1e-6);
        assert!(curve[1].1 >= curve[2].1 - 1e-6);
        assert!(matches!(
            rstar_eta_curve(&inst, 0, 4, &[0.5, 0.1], 1e-8),
            Err(SolverError::BadEtaGrid)
        ));
        assert!(matches!(
            rstar_eta_curve(&inst, 0, 4, &[0.0, 0.5], 1e-8),
            Err(SolverError::BadEtaGrid)
        ));
    }

    #[test]
    fn eta_zero_lp_upper_bounds_smallest_eta() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let near_zero = solve_rstar(&mdp, 0.01, 1e-8).unwrap().r_star;
        let at_zero = solve_rstar(&mdp, 0.0, 1e-8).unwrap().r_star;
        assert!(at_zero >= near_zero - 1e-8);
    }

    #[test]
    fn lower_bound_floor_examples() {
        // d(eps, 1-eps) -> 0 as eps -> 1/2, so the floor vanishes there
        assert!(lower_bound_expected_tau(0.5, 0.4999999) < 1e-5);
        // 0.98 ln 99 / 0.5, the direct evaluation of the floor at eps = 0.01
        let v = lower_bound_expected_tau(0.5, 0.01);
        assert!((v - 0.98 * 99f64.ln() / 0.5).abs() < 1e-9);
        assert!((v - 9.006_435).abs() < 1e-4);
        // floor / ln(1/eps) -> 1/r* as eps -> 0
        let eps = 1e-10;
        let ratio = lower_bound_expected_tau(0.5, eps) / (1.0 / eps).ln();
        assert!((ratio - 2.0).abs() < 0.01);
    }

    #[test]
    fn explicit_srs_occupancy_is_lp_feasible() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let mut rng = stream_rng(51, stream::FUZZ, 0);
        for _ in 0..3 {
            let mut table = PolicyTable::uniform(3, 4);
            for key in mdp.states() {
                let mut row: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                let fix = 1.0 - row.iter().sum::<f64>();
                row[2] += fix;
                table.insert(key.clone(), row).unwrap();
            }
            let nu = mdp.occupancy_of_policy(&table, 0.1, 1e-13).unwrap();
            assert!(mdp.balance_residual(&nu) < 1e-8);
            // floor constraint holds too
            for s in 0..mdp.n_states() {
                let m: f64 = (0..3).map(|a| nu[s * 3 + a]).sum();
                for a in 0..3 {
                    assert!(nu[s * 3 + a] >= 0.1 / 3.0 * m - 1e-12);
                }
            }
        }
    }

    #[test]
    fn policy_occupancy_round_trip() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let mut rng = stream_rng(52, stream::FUZZ, 0);
        let mut table = PolicyTable::uniform(3, 4);
        for key in mdp.states() {
            let mut row: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            let fix = 1.0 - row.iter().sum::<f64>();
            row[2] += fix;
            table.insert(key.clone(), row).unwrap();
        }
        let nu = mdp.occupancy_of_policy(&table, 0.1, 1e-13).unwrap();
        let recovered = mdp.extract_policy(&nu, 0.1).unwrap();
        for key in mdp.states() {
            let orig = table.row(key);
            let rec = recovered.row(key);
            for a in 0..3 {
                assert!(
                    (orig[a] - rec[a]).abs() < 1e-8,
                    "state {key:?} arm {a}: {} vs {}",
                    orig[a],
                    rec[a]
                );
            }
        }
    }

    #[test]
    fn tables_with_smaller_caps_are_recapped_for_lookups() {
        // a D=3 table whose every stored row is a point mass on arm 0,
        // evaluated on the D=5 chain: deep-delay states must resolve to the
        // stored rows (conditional pull mass eta/K + (1-eta) on arm 0), not
        // to the uniform default
        let inst = canonical();
        let coarse = build_truncated_mdp(&inst, 0, 3).unwrap();
        let fine = build_truncated_mdp(&inst, 0, 5).unwrap();
        let mut table = PolicyTable::uniform(3, 3);
        for key in coarse.states() {
            table.insert(key.clone(), vec![1.0, 0.0, 0.0]).unwrap();
        }
        let nu = fine.occupancy_of_policy(&table, 0.1, 1e-13).unwrap();
        let expect = 0.1 / 3.0 + 0.9;
        for (s, key) in fine.states().iter().enumerate() {
            if key.delays.iter().all(|&d| d <= 3) {
                continue;
            }
            let mass: f64 = (0..3).map(|a| nu[s * 3 + a]).sum();
            if mass < 1e-9 {
                continue;
            }
            let cond = nu[s * 3] / mass;
            assert!(
                (cond - expect).abs() < 1e-9,
                "state {key:?}: conditional {cond} vs {expect}"
            );
        }
    }

    #[test]
    fn ergodicity_witness_positive_stationary_vector() {
        let inst = canonical();
        let mdp = build_truncated_mdp(&inst, 0, 4).unwrap();
        let mut rng = stream_rng(53, stream::FUZZ, 0);
        let mut table = PolicyTable::uniform(3, 4);
        for key in mdp.states() {
            let mut row: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            let fix = 1.0 - row.iter().sum::<f64>();
            row[0] += fix;
            table.insert(key.clone(), row).unwrap();
        }
        let mu = mdp.closed_loop_stationary(&table, 0.1, 1e-13).unwrap();
        assert!(mu.iter().all(|&x| x > 0.0));
        assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
