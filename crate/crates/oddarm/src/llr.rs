//! Incremental log-likelihood-ratio statistics.
//!
//! For an ordered hypothesis pair `(h, h')`, `Z[h][h']` accumulates the
//! log-likelihood of the observation stream under "arm h is odd" against
//! "arm h' is odd". Only the pulled arm contributes: a pull of arm `a` at
//! delay `d` from last state `i` observing `j` adds
//! `ln(P1^d(j|i) / P2^d(j|i))` to every `Z[a][·]` row and subtracts it from
//! every `Z[·][a]` column, which keeps the matrix antisymmetric. Intended
//! pulls and the trembling outcome carry no likelihood information because
//! neither depends on the hypothesis.

use crate::env::BanditInstance;
use crate::markov::PowerCache;
use crate::tracker::{CountsTable, DelayState};
use thiserror::Error;

/// Default delay cap for the precomputed log-ratio tables. Rows of `P^d`
/// converge geometrically in `d`, so beyond a well-mixed horizon the capped
/// table is exact to float tolerance.
pub const DEFAULT_LLR_DELAY_CAP: u32 = 64;

#[derive(Debug, Error)]
pub enum LlrError {
    #[error("support mismatch: log-ratio at d={d}, i={i}, j={j} is not finite")]
    InfiniteLogRatio { d: u32, i: usize, j: usize },
}

/// Precomputed tables `ln(P1^d(j|i) / P2^d(j|i))` for `d = 1..=d_cap`.
///
/// Built once per instance; shared read-only across trials.
#[derive(Debug, Clone)]
pub struct PairKlCache {
    n_states: usize,
    d_cap: u32,
    // log_ratio[d-1][i * n_states + j]
    log_ratio: Vec<Vec<f64>>,
}

impl PairKlCache {
    pub fn new(instance: &BanditInstance, d_cap: u32) -> Result<Self, LlrError> {
        let s = instance.n_states();
        let p1_pows = PowerCache::new(instance.p1().clone(), d_cap);
        let p2_pows = PowerCache::new(instance.p2().clone(), d_cap);
        let mut log_ratio = Vec::with_capacity(d_cap as usize);
        for d in 1..=d_cap {
            let a = p1_pows.power(d);
            let b = p2_pows.power(d);
            let mut table = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    let (x, y) = (a.get(i, j), b.get(i, j));
                    if x == 0.0 && y == 0.0 {
                        // unreachable transition under both hypotheses; the
                        // increment is never evaluated there
                        table[i * s + j] = 0.0;
                        continue;
                    }
                    let r = (x / y).ln();
                    if !r.is_finite() {
                        return Err(LlrError::InfiniteLogRatio { d, i, j });
                    }
                    table[i * s + j] = r;
                }
            }
            log_ratio.push(table);
        }
        Ok(Self {
            n_states: s,
            d_cap,
            log_ratio,
        })
    }

    pub fn d_cap(&self) -> u32 {
        self.d_cap
    }

    /// `ln(P1^d(j|i) / P2^d(j|i))`, with `d` clamped to the cap.
    #[inline]
    pub fn log_ratio(&self, d: u32, i: usize, j: usize) -> f64 {
        let d = d.max(1).min(self.d_cap);
        self.log_ratio[(d - 1) as usize][i * self.n_states + j]
    }
}

/// The increment contributed to `Z[h][h']` by pulling arm `arm` at delay `d`
/// from last state `i` and observing `j`. Zero unless `arm` is `h` or `h'`.
pub fn llr_increment(
    cache: &PairKlCache,
    arm: usize,
    d: u32,
    i: usize,
    j: usize,
    pair: (usize, usize),
) -> f64 {
    let (h, hp) = pair;
    if arm == h {
        cache.log_ratio(d, i, j)
    } else if arm == hp {
        -cache.log_ratio(d, i, j)
    } else {
        0.0
    }
}

/// The `K x K` matrix of pairwise log-likelihood ratios at the current tick.
#[derive(Debug, Clone)]
pub struct LlrState {
    n_arms: usize,
    z: Vec<f64>, // row-major K*K, z[h * K + h'] = Z_{h h'}(n), diagonal 0
    horizon: u64,
}

impl LlrState {
    pub fn new(n_arms: usize) -> Self {
        Self {
            n_arms,
            z: vec![0.0; n_arms * n_arms],
            horizon: 0,
        }
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// `Z_{h h'}(n)` in nats.
    #[inline]
    pub fn z(&self, h: usize, hp: usize) -> f64 {
        self.z[h * self.n_arms + hp]
    }

    /// Folds one tick into every ordered pair. `pre_update` must be the delay
    /// state *before* the tracker update for this tick.
    pub fn apply_step(
        &mut self,
        cache: &PairKlCache,
        pre_update: &DelayState,
        actual: usize,
        observation: usize,
    ) {
        let d = pre_update.delay_of(actual);
        let i = pre_update.last_state_of(actual);
        let lr = cache.log_ratio(d, i, observation);
        let k = self.n_arms;
        for other in 0..k {
            if other == actual {
                continue;
            }
            self.z[actual * k + other] += lr;
            self.z[other * k + actual] -= lr;
        }
        self.horizon += 1;
    }

    /// `M_h(n) = min_{h' != h} Z_{h h'}(n)`, the stopping statistic.
    pub fn test_statistic(&self, h: usize) -> f64 {
        (0..self.n_arms)
            .filter(|&hp| hp != h)
            .map(|hp| self.z(h, hp))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sets `Z_{h h'}` and its antisymmetric mirror. Test fixtures only.
    #[cfg(test)]
    pub(crate) fn set_pair_for_tests(&mut self, h: usize, hp: usize, value: f64) {
        let k = self.n_arms;
        self.z[h * k + hp] = value;
        self.z[hp * k + h] = -value;
    }

    /// Largest antisymmetry violation `|Z_{h h'} + Z_{h' h}|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let k = self.n_arms;
        let mut worst = 0.0f64;
        for h in 0..k {
            for hp in 0..k {
                worst = worst.max((self.z[h * k + hp] + self.z[hp * k + h]).abs());
            }
        }
        worst
    }
}

/// Recomputes the full LLR matrix from a counts table whose delay cap matches
/// the cache's, by summing `N(n, d, i, a, j) * log-ratio` over the table. This
/// is the batch form of the statistic and serves as the consistency oracle for
/// the incremental path.
pub fn batch_from_counts(cache: &PairKlCache, counts: &CountsTable, n_arms: usize) -> LlrState {
    let mut llr = LlrState::new(n_arms);
    for ((key, arm, j), &count) in counts.transitions() {
        let d = key.delays[*arm];
        let i = key.states[*arm];
        let lr = cache.log_ratio(d, i, *j) * count as f64;
        for other in 0..n_arms {
            if other == *arm {
                continue;
            }
            llr.z[*arm * n_arms + other] += lr;
            llr.z[other * n_arms + *arm] -= lr;
        }
    }
    llr.horizon = counts.horizon();
    llr
}
