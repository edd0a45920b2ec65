//! Dependency-free fallback for the occupancy program: projected subgradient
//! ascent on the epigraph objective `min_{h'} c_{h'}·nu` with iterate
//! averaging.
//!
//! Each step ascends along the active (minimizing) alternative's reward
//! vector, then corrects feasibility by alternating between the exact
//! Euclidean projection onto the affine set (balance rows plus mass one,
//! via a cached Cholesky factor of `A·Aᵀ`) and a per-state nonnegativity /
//! trembling-floor repair. The averaged iterate is not itself feasible to
//! machine precision, so the returned value is computed the honest way: the
//! intended-pull table extracted from the average is evaluated exactly
//! through the closed-loop stationary solve, making the reported `r_star`
//! the achieved drift of a genuine stationary strategy (a certified lower
//! bound on the truncated optimum, roughly 1e-3 relative on desk instances).

use super::{finish_result, SolverError, SolverResult, TruncatedMdp};
use crate::policy::PolicyTable;

/// Hard ceiling on subgradient iterations.
pub const MAX_ITERS_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy)]
pub struct SubgradientOptions {
    /// Ascent iterations (clamped to [`MAX_ITERS_CAP`]).
    pub max_iters: u64,
    /// Step size at iteration `t` is `step_scale / sqrt(t)`.
    pub step_scale: f64,
    /// Alternating projection passes after every ascent step.
    pub projection_passes: usize,
    /// Tolerance of the final stationary evaluation.
    pub stationary_tol: f64,
}

impl Default for SubgradientOptions {
    fn default() -> Self {
        Self {
            max_iters: 60_000,
            step_scale: 0.05,
            projection_passes: 2,
            stationary_tol: 1e-13,
        }
    }
}

/// Dense Cholesky of `A·Aᵀ` for the affine rows of the program.
struct AffineProjector {
    n_rows: usize,
    /// sparse rows of A over flat (state, arm) indices
    rows: Vec<Vec<(usize, f64)>>,
    /// lower-triangular Cholesky factor of A·Aᵀ, row-major
    chol: Vec<f64>,
    rhs: Vec<f64>,
}

impl AffineProjector {
    fn new(mdp: &TruncatedMdp) -> Result<Self, SolverError> {
        let k = mdp.n_arms();
        let n = mdp.n_states();
        // balance rows for all but the last state (implied), then the mass row
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for s in 0..n {
            for a in 0..k {
                for &(t, p) in mdp.transitions(s, a) {
                    incoming[t].push((s * k + a, p));
                }
            }
        }
        for (sp, inflow) in incoming.iter().enumerate().take(n - 1) {
            let mut coeff = std::collections::HashMap::new();
            for a in 0..k {
                coeff.insert(sp * k + a, 1.0);
            }
            for &(flat, p) in inflow {
                *coeff.entry(flat).or_insert(0.0) -= p;
            }
            let mut row: Vec<(usize, f64)> = coeff.into_iter().filter(|&(_, c)| c != 0.0).collect();
            row.sort_unstable_by_key(|&(i, _)| i);
            rows.push(row);
        }
        rows.push((0..n * k).map(|i| (i, 1.0)).collect());
        let n_rows = rows.len();
        let mut rhs = vec![0.0; n_rows];
        rhs[n_rows - 1] = 1.0;

        // gram = A·Aᵀ accumulated column by column
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n * k];
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                cols[c].push((r, v));
            }
        }
        let mut gram = vec![0.0; n_rows * n_rows];
        for col in &cols {
            for &(r1, v1) in col {
                for &(r2, v2) in col {
                    gram[r1 * n_rows + r2] += v1 * v2;
                }
            }
        }
        // ridge keeps the factorization stable when rows are near-dependent
        for d in 0..n_rows {
            gram[d * n_rows + d] += 1e-12;
        }
        let chol = cholesky(gram, n_rows)?;
        Ok(Self {
            n_rows,
            rows,
            chol,
            rhs,
        })
    }

    /// `x <- x - Aᵀ (A Aᵀ)^{-1} (A x - b)`.
    #[allow(clippy::needless_range_loop)] // triangular solves read clearest indexed
    fn project(&self, x: &mut [f64]) {
        let m = self.n_rows;
        let mut resid = vec![0.0; m];
        for (r, row) in self.rows.iter().enumerate() {
            let mut dot = 0.0;
            for &(c, v) in row {
                dot += v * x[c];
            }
            resid[r] = dot - self.rhs[r];
        }
        // solve L Lᵀ y = resid
        for i in 0..m {
            let mut s = resid[i];
            for j in 0..i {
                s -= self.chol[i * m + j] * resid[j];
            }
            resid[i] = s / self.chol[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = resid[i];
            for j in (i + 1)..m {
                s -= self.chol[j * m + i] * resid[j];
            }
            resid[i] = s / self.chol[i * m + i];
        }
        for (r, row) in self.rows.iter().enumerate() {
            let y = resid[r];
            if y == 0.0 {
                continue;
            }
            for &(c, v) in row {
                x[c] -= v * y;
            }
        }
    }
}

fn cholesky(mut a: Vec<f64>, n: usize) -> Result<Vec<f64>, SolverError> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= a[i * n + t] * a[j * n + t];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(SolverError::NumericalFailure(format!(
                        "Cholesky pivot {s} at row {i}"
                    )));
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(a)
}

/// Pushes `x` back toward the nonnegative, trembling-floored cone, state by
/// state. Not an exact projection; a repair pass between affine projections.
fn repair_cone(x: &mut [f64], n_states: usize, k: usize, eta: f64) {
    let frac = eta / k as f64;
    for s in 0..n_states {
        let slot = &mut x[s * k..(s + 1) * k];
        for v in slot.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if frac > 0.0 {
            for _ in 0..3 {
                let m: f64 = slot.iter().sum();
                let floor = frac * m;
                let mut bumped = false;
                for v in slot.iter_mut() {
                    if *v < floor {
                        *v = floor;
                        bumped = true;
                    }
                }
                if !bumped {
                    break;
                }
            }
        }
    }
}

/// Approximate solve by projected subgradient with averaging; see the module
/// docs for the feasibility-by-evaluation contract.
pub fn solve_rstar_subgradient(
    mdp: &TruncatedMdp,
    eta: f64,
    opts: SubgradientOptions,
) -> Result<SolverResult, SolverError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SolverError::BadEta(eta));
    }
    let k = mdp.n_arms();
    let n = mdp.n_states();
    let dim = n * k;
    let projector = AffineProjector::new(mdp)?;
    let iters = opts.max_iters.clamp(1, MAX_ITERS_CAP);

    // start from the uniform-policy occupancy: feasible and interior
    let uniform = PolicyTable::uniform(k, mdp.d_cap());
    let mut x = mdp.occupancy_of_policy(&uniform, eta, opts.stationary_tol)?;
    let mut avg = vec![0.0; dim];
    let tail_start = iters / 2;
    let mut tail_count = 0u64;

    for t in 1..=iters {
        // subgradient of the min: the active alternative's reward vector
        let h = mdp.odd_arm();
        let mut worst = (usize::MAX, f64::INFINITY);
        for hp in (0..k).filter(|&hp| hp != h) {
            let v = mdp.pair_drift(&x, hp);
            if v < worst.1 {
                worst = (hp, v);
            }
        }
        let hp = worst.0;
        let gamma = opts.step_scale / (t as f64).sqrt();
        for s in 0..n {
            x[s * k + h] += gamma * mdp.reward(s, h, hp);
            x[s * k + hp] += gamma * mdp.reward(s, hp, hp);
        }
        for _ in 0..opts.projection_passes {
            projector.project(&mut x);
            repair_cone(&mut x, n, k, eta);
        }
        if t > tail_start {
            for (a, &v) in avg.iter_mut().zip(x.iter()) {
                *a += v;
            }
            tail_count += 1;
        }
    }
    for a in avg.iter_mut() {
        *a /= tail_count as f64;
    }

    // evaluate candidates exactly; keep the best achieved policy
    let mut best: Option<(f64, Vec<f64>)> = None;
    for candidate in [&avg, &x] {
        let table = mdp.extract_policy(candidate, eta)?;
        let nu = mdp.occupancy_of_policy(&table, eta, opts.stationary_tol)?;
        let value = mdp.min_drift(&nu);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, nu));
        }
    }
    let (_, nu) = best.expect("at least one candidate");
    finish_result(mdp, eta, opts.stationary_tol, nu, "subgradient")
}
