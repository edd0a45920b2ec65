//! Finite-state Markov chain primitives: row-stochastic matrices, matrix
//! powers, stationary distributions, and KL divergences. Everything downstream
//! is built on these.
//!
//! All divergences are in nats.

use thiserror::Error;

/// Absolute tolerance for "this row sums to one".
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default cap when searching for a power of the matrix with all entries
/// strictly positive (the primitivity / ergodicity witness).
pub const DEFAULT_MIXING_CAP: u32 = 512;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("matrix must have at least 2 states, got {0}")]
    TooSmall(usize),
    #[error("row {row} is not a probability vector: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("matrix is not ergodic: no power up to {0} has all entries positive")]
    NotErgodic(u32),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("power iteration did not reach tolerance {tol} in {iters} iterations")]
    NoConvergence { tol: f64, iters: u64 },
}

/// A row-stochastic matrix on a finite state space; `rows[i][j] = P(j|i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>, // row-major, n*n
}

impl TransitionMatrix {
    /// Validates and wraps a matrix given as rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MarkovError> {
        let n = rows.len();
        if n < 2 {
            return Err(MarkovError::TooSmall(n));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MarkovError::BadRow {
                    row: i,
                    reason: format!("length {} != {}", row.len(), n),
                });
            }
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 || !p.is_finite() {
                    return Err(MarkovError::BadRow {
                        row: i,
                        reason: format!("entry {p} is negative or non-finite"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::BadRow {
                    row: i,
                    reason: format!("sums to {sum}, not 1"),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    /// `P(j|i)`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Row `i` as a probability vector over next states.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n)
    }

    /// Matrix product `self * other`.
    pub fn multiply(&self, other: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * n..(k + 1) * n];
                let drow = &mut data[i * n..(i + 1) * n];
                for (d, &o) in drow.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        TransitionMatrix { n, data }
    }

    /// True if the two matrices share a support pattern: `P(j|i) > 0` iff
    /// `Q(j|i) > 0` for all `i, j`.
    pub fn same_support(&self, other: &TransitionMatrix) -> bool {
        self.n == other.n
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| (a > 0.0) == (b > 0.0))
    }

    /// Maximum absolute entry difference.
    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `P^d` by repeated squaring. `d >= 1`.
pub fn matrix_power(p: &TransitionMatrix, d: u32) -> TransitionMatrix {
    assert!(d >= 1, "matrix_power requires d >= 1");
    let mut result: Option<TransitionMatrix> = None;
    let mut base = p.clone();
    let mut e = d;
    while e > 0 {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => r.multiply(&base),
            });
        }
        e >>= 1;
        if e > 0 {
            base = base.multiply(&base);
        }
    }
    result.unwrap()
}

/// Cache of `P^1 .. P^max_power`, built with consecutive products.
#[derive(Debug, Clone)]
pub struct PowerCache {
    base: TransitionMatrix,
    powers: Vec<TransitionMatrix>,
}

impl PowerCache {
    pub fn new(base: TransitionMatrix, max_power: u32) -> Self {
        assert!(max_power >= 1);
        let mut powers = Vec::with_capacity(max_power as usize);
        powers.push(base.clone());
        for _ in 1..max_power {
            let next = powers.last().unwrap().multiply(&base);
            powers.push(next);
        }
        Self { base, powers }
    }

    pub fn base(&self) -> &TransitionMatrix {
        &self.base
    }

    pub fn max_power(&self) -> u32 {
        self.powers.len() as u32
    }

    /// `P^d` for `1 <= d <= max_power`.
    pub fn power(&self, d: u32) -> &TransitionMatrix {
        assert!(d >= 1 && d <= self.max_power());
        &self.powers[(d - 1) as usize]
    }

    /// `P^min(d, max_power)`: delays beyond the cap use the capped power.
    pub fn power_capped(&self, d: u32) -> &TransitionMatrix {
        let d = d.max(1).min(self.max_power());
        &self.powers[(d - 1) as usize]
    }
}

/// A probability vector fixed by its source matrix: `mu P = mu`.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    probs: Vec<f64>,
}

impl StationaryDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Smallest `m <= m_max` such that every entry of `P^m` is strictly positive.
///
/// Existence of such an `m` witnesses irreducibility and aperiodicity at once;
/// the returned exponent doubles as the mixing horizon reported by `validate`.
pub fn mixing_exponent(p: &TransitionMatrix, m_max: u32) -> Result<u32, MarkovError> {
    let n = p.n_states();
    // Walk the boolean support pattern; magnitudes are irrelevant here.
    let mut pat: Vec<bool> = p.data.iter().map(|&x| x > 0.0).collect();
    let base: Vec<bool> = pat.clone();
    for m in 1..=m_max {
        if pat.iter().all(|&b| b) {
            return Ok(m);
        }
        let mut next = vec![false; n * n];
        for i in 0..n {
            for k in 0..n {
                if pat[i * n + k] {
                    for j in 0..n {
                        if base[k * n + j] {
                            next[i * n + j] = true;
                        }
                    }
                }
            }
        }
        pat = next;
    }
    if pat.iter().all(|&b| b) {
        return Ok(m_max);
    }
    Err(MarkovError::NotErgodic(m_max))
}

/// Stationary distribution by power iteration on `P^T`, to `‖mu P − mu‖∞ <= tol`.
///
/// Errors with `NotErgodic` when no power of `P` up to [`DEFAULT_MIXING_CAP`]
/// is strictly positive (e.g. reducible or periodic chains).
pub fn stationary(p: &TransitionMatrix, tol: f64) -> Result<StationaryDistribution, MarkovError> {
    mixing_exponent(p, DEFAULT_MIXING_CAP)?;
    let n = p.n_states();
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let max_iters: u64 = 1_000_000;
    for _ in 0..max_iters {
        for x in next.iter_mut() {
            *x = 0.0;
        }
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (nx, &pij) in next.iter_mut().zip(p.row(i)) {
                *nx += m * pij;
            }
        }
        let sum: f64 = next.iter().sum();
        for x in next.iter_mut() {
            *x /= sum;
        }
        let err = mu
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut mu, &mut next);
        if err <= tol {
            return Ok(StationaryDistribution { probs: mu });
        }
    }
    Err(MarkovError::NoConvergence {
        tol,
        iters: max_iters,
    })
}

/// `D(mu ‖ nu) = Σ mu(i) ln(mu(i)/nu(i))`, with `0·ln(0/0) = 0` and the
/// `+∞` sentinel when `mu` puts mass outside the support of `nu`.
pub fn kl_divergence(mu: &[f64], nu: &[f64]) -> Result<f64, MarkovError> {
    if mu.len() != nu.len() {
        return Err(MarkovError::DimensionMismatch(mu.len(), nu.len()));
    }
    let mut d = 0.0;
    for (&m, &v) in mu.iter().zip(nu) {
        if m == 0.0 {
            continue;
        }
        if v == 0.0 {
            return Ok(f64::INFINITY);
        }
        d += m * (m / v).ln();
    }
    Ok(d)
}

/// Which of the two hypothesis laws sits in the numerator of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `D(P1^d(·|i) ‖ P2^d(·|i))` — the pulled arm is odd under the null.
    OddVsNormal,
    /// `D(P2^d(·|i) ‖ P1^d(·|i))` — the pulled arm is odd under the alternative.
    NormalVsOdd,
}

/// KL divergence between row `i` of `P1^d` and row `i` of `P2^d` (or swapped).
pub fn kl_reward(
    p1: &TransitionMatrix,
    p2: &TransitionMatrix,
    d: u32,
    i: usize,
    direction: Direction,
) -> Result<f64, MarkovError> {
    let a = matrix_power(p1, d);
    let b = matrix_power(p2, d);
    match direction {
        Direction::OddVsNormal => kl_divergence(a.row(i), b.row(i)),
        Direction::NormalVsOdd => kl_divergence(b.row(i), a.row(i)),
    }
}

/// Binary relative entropy `d(x, y) = x ln(x/y) + (1−x) ln((1−x)/(1−y))`.
pub fn binary_relative_entropy(x: f64, y: f64) -> Result<f64, MarkovError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(MarkovError::DomainError(format!("x = {x} outside [0,1]")));
    }
    let mut d = 0.0;
    if x > 0.0 {
        if y <= 0.0 {
            return Err(MarkovError::DomainError("y = 0 with x > 0".into()));
        }
        d += x * (x / y).ln();
    }
    if x < 1.0 {
        if y >= 1.0 {
            return Err(MarkovError::DomainError("y = 1 with x < 1".into()));
        }
        d += (1.0 - x) * ((1.0 - x) / (1.0 - y)).ln();
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn canonical_p1() -> TransitionMatrix {
        TransitionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    pub(crate) fn canonical_p2() -> TransitionMatrix {
        TransitionMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn power_of_one_is_identity_map() {
        let p = canonical_p1();
        assert!(matrix_power(&p, 1).max_abs_diff(&p) < 1e-15);
        let id = TransitionMatrix::identity(4);
        assert!(matrix_power(&id, 7).max_abs_diff(&id) < 1e-15);
    }

    #[test]
    fn square_matches_hand_multiplication() {
        // [[0.9,0.1],[0.2,0.8]]^2 = [[0.83,0.17],[0.34,0.66]]
        let p2 = matrix_power(&canonical_p1(), 2);
        let want = TransitionMatrix::from_rows(vec![vec![0.83, 0.17], vec![0.34, 0.66]]).unwrap();
        assert!(p2.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn power_cache_matches_recomputation() {
        let cache = PowerCache::new(canonical_p1(), 16);
        for d in [1u32, 3, 7, 16] {
            let direct = matrix_power(&canonical_p1(), d);
            assert!(cache.power(d).max_abs_diff(&direct) < 1e-10, "d = {d}");
        }
        assert!(cache.power_capped(99).max_abs_diff(cache.power(16)) < 1e-15);
    }

    #[test]
    fn stationary_doubly_stochastic_is_uniform() {
        let p = TransitionMatrix::from_rows(vec![
            vec![0.2, 0.3, 0.5],
            vec![0.5, 0.2, 0.3],
            vec![0.3, 0.5, 0.2],
        ])
        .unwrap();
        let mu = stationary(&p, 1e-12).unwrap();
        for &x in mu.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stationary_canonical_two_thirds() {
        // Solve mu P = mu by hand: mu = (2/3, 1/3).
        let mu = stationary(&canonical_p1(), 1e-13).unwrap();
        assert!((mu.probs()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((mu.probs()[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_is_not_ergodic() {
        let id = TransitionMatrix::identity(3);
        assert!(matches!(
            stationary(&id, 1e-10),
            Err(MarkovError::NotErgodic(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let d = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((d - 0.143841).abs() < 1e-5);
        // exercises the 0·log0 convention
        let d = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        // support violation yields the sentinel
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0])
            .unwrap()
            .is_infinite());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kl_reward_examples() {
        let p1 = canonical_p1();
        let p2 = canonical_p2();
        for d in [1, 2, 5] {
            for i in 0..2 {
                let r = kl_reward(&p1, &p1, d, i, Direction::OddVsNormal).unwrap();
                assert!(r.abs() < 1e-12);
            }
        }
        // 0.9 ln 1.8 + 0.1 ln 0.2
        let r = kl_reward(&p1, &p2, 1, 0, Direction::OddVsNormal).unwrap();
        assert!((r - 0.368_064_2).abs() < 1e-5);
    }

    #[test]
    fn kl_reward_converges_to_stationary_divergence() {
        let p1 = canonical_p1();
        let p2 = canonical_p2();
        let mu1 = stationary(&p1, 1e-14).unwrap();
        let mu2 = stationary(&p2, 1e-14).unwrap();
        let limit = kl_divergence(mu1.probs(), mu2.probs()).unwrap();
        let at64 = kl_reward(&p1, &p2, 64, 0, Direction::OddVsNormal).unwrap();
        assert!((at64 - limit).abs() <= 1e-6, "{at64} vs {limit}");
        // decreasing increments beyond mixing
        let mut prev = f64::INFINITY;
        for d in 8..20 {
            let a = kl_reward(&p1, &p2, d, 0, Direction::OddVsNormal).unwrap();
            let b = kl_reward(&p1, &p2, d + 1, 0, Direction::OddVsNormal).unwrap();
            let gap = (a - b).abs();
            assert!(gap <= prev + 1e-15);
            prev = gap;
        }
    }

    #[test]
    fn binary_relative_entropy_examples() {
        assert_eq!(binary_relative_entropy(0.5, 0.5).unwrap(), 0.0);
        // direct evaluation: 0.98 * ln 99
        let d = binary_relative_entropy(0.01, 0.99).unwrap();
        assert!((d - 0.98 * 99f64.ln()).abs() < 1e-12);
        assert!((d - 4.503_217_7).abs() < 1e-5);
        // d(eps, 1-eps)/ln(1/eps) -> 1
        let eps = 1e-8;
        let ratio = binary_relative_entropy(eps, 1.0 - eps).unwrap() / (1.0 / eps).ln();
        assert!((ratio - 1.0).abs() < 0.05);
        assert!(binary_relative_entropy(0.3, 0.0).is_err());
        assert!(binary_relative_entropy(0.3, 1.0).is_err());
        // endpoint x handled by the 0 log 0 convention
        assert!(binary_relative_entropy(0.0, 0.5).unwrap().is_finite());
    }

    #[test]
    fn stationary_matches_simulated_frequencies() {
        use crate::rng::{stream, stream_rng};
        use rand::Rng;
        let p = canonical_p1();
        let mu = stationary(&p, 1e-12).unwrap();
        let mut rng = stream_rng(123, stream::FUZZ, 9);
        let mut state = 0usize;
        let mut counts = [0u64; 2];
        let n = 1_000_000u64;
        for _ in 0..n {
            let row = p.row(state);
            let u: f64 = rng.gen();
            state = if u < row[0] { 0 } else { 1 };
            counts[state] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(mu.probs())
            .map(|(&c, &m)| (c as f64 / n as f64 - m).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv = {tv}");
    }

    fn arb_stochastic(n: usize) -> impl Strategy<Value = TransitionMatrix> {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), n).prop_map(|rows| {
            let rows = rows
                .into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>();
            // renormalized rows can miss 1.0 by a few ulps; rebalance the last entry
            let rows = rows
                .into_iter()
                .map(|mut r| {
                    let s: f64 = r.iter().sum();
                    let last = r.len() - 1;
                    r[last] += 1.0 - s;
                    r
                })
                .collect();
            TransitionMatrix::from_rows(rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn powers_stay_row_stochastic(p in arb_stochastic(4), d in 1u32..=64) {
            let q = matrix_power(&p, d);
            for row in q.rows() {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
                prop_assert!(row.iter().all(|&x| x >= -1e-15));
            }
        }

        #[test]
        fn kl_nonnegative_zero_iff_equal(
            mu in prop::collection::vec(0.01f64..1.0, 4),
            nu in prop::collection::vec(0.01f64..1.0, 4),
        ) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (mu, nu) = (norm(&mu), norm(&nu));
            let d = kl_divergence(&mu, &nu).unwrap();
            prop_assert!(d >= -1e-12);
            let equal = mu.iter().zip(&nu).all(|(a, b)| (a - b).abs() < 1e-12);
            if equal {
                prop_assert!(d.abs() < 1e-10);
            }
            let self_d = kl_divergence(&mu, &mu).unwrap();
            prop_assert!(self_d.abs() < 1e-12);
        }
    }
}
