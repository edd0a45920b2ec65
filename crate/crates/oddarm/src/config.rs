//! Run configuration: a single JSON file describing the instance, the solver
//! settings, and the sweep grid. Unknown keys are rejected so typos fail
//! loudly.

use crate::env::{BanditInstance, EnvError, Warmup};
use crate::markov::{mixing_exponent, TransitionMatrix, DEFAULT_MIXING_CAP, ROW_SUM_TOL};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Instance(#[from] EnvError),
    #[error(transparent)]
    Matrix(#[from] crate::markov::MarkovError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub n_arms: usize,
    pub p1: Vec<Vec<f64>>,
    pub p2: Vec<Vec<f64>>,
    pub eta: f64,
    #[serde(default)]
    pub init_law: Option<Vec<f64>>,
}

fn default_d_cap() -> u32 {
    8
}
fn default_tol() -> f64 {
    1e-8
}
fn default_delta() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    #[default]
    Exact,
    Subgradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_d_cap")]
    pub d_cap: u32,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub method: SolveMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            d_cap: default_d_cap(),
            tol: default_tol(),
            delta: default_delta(),
            eta_grid: None,
            method: SolveMethod::Exact,
        }
    }
}

fn default_l_values() -> Vec<f64> {
    vec![100.0, 1_000.0, 10_000.0]
}
fn default_trials() -> u64 {
    1_000
}
fn default_seed() -> u64 {
    1
}
fn default_max_steps() -> u64 {
    10_000_000
}
fn default_llr_cap() -> u32 {
    crate::llr::DEFAULT_LLR_DELAY_CAP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_l_values")]
    pub l_values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials_per_cell: u64,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_llr_cap")]
    pub d_cap_llr: u32,
    #[serde(default)]
    pub warmup: Warmup,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            l_values: default_l_values(),
            trials_per_cell: default_trials(),
            parallelism: None,
            master_seed: default_seed(),
            max_steps: default_max_steps(),
            d_cap_llr: default_llr_cap(),
            warmup: Warmup::Forced,
        }
    }
}

fn default_output_dir() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub instance: InstanceConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl RunConfig {
    pub fn parse_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::parse_json(&text)?;
        Ok((cfg, text))
    }

    /// Builds and fully validates the bandit instance.
    pub fn build_instance(&self) -> Result<BanditInstance, ConfigError> {
        let p1 = TransitionMatrix::from_rows(self.instance.p1.clone())?;
        let p2 = TransitionMatrix::from_rows(self.instance.p2.clone())?;
        Ok(BanditInstance::new(
            self.instance.n_arms,
            p1,
            p2,
            self.instance.eta,
            self.instance.init_law.clone(),
        )?)
    }
}

/// One validation check's outcome, in the order checks run.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub check: &'static str,
    pub ok: bool,
    pub detail: String,
}

/// Runs the instance assumptions one at a time so the first violation can be
/// named: row stochasticity, support equality, ergodicity (with the
/// discovered mixing exponent), and distinctness of the two laws.
pub fn diagnostics(cfg: &InstanceConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    let stochastic = |rows: &[Vec<f64>], name: &str| -> Diagnostic {
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) {
                return Diagnostic {
                    check: "stochasticity",
                    ok: false,
                    detail: format!("{name} row {i} has a negative entry"),
                };
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Diagnostic {
                    check: "stochasticity",
                    ok: false,
                    detail: format!("{name} row {i} sums to {sum}"),
                };
            }
        }
        Diagnostic {
            check: "stochasticity",
            ok: true,
            detail: format!("{name} rows sum to 1"),
        }
    };
    let d1 = stochastic(&cfg.p1, "P1");
    let ok1 = d1.ok;
    out.push(d1);
    let d2 = stochastic(&cfg.p2, "P2");
    let ok2 = d2.ok;
    out.push(d2);
    if !(ok1 && ok2) {
        return out;
    }

    let support_ok = cfg.p1.len() == cfg.p2.len()
        && cfg.p1.iter().zip(&cfg.p2).all(|(r1, r2)| {
            r1.len() == r2.len() && r1.iter().zip(r2).all(|(&a, &b)| (a > 0.0) == (b > 0.0))
        });
    out.push(Diagnostic {
        check: "support",
        ok: support_ok,
        detail: if support_ok {
            "P1(j|i) > 0 iff P2(j|i) > 0".into()
        } else {
            "support patterns differ".into()
        },
    });
    if !support_ok {
        return out;
    }

    let ergodic = |rows: &[Vec<f64>], name: &str| -> Diagnostic {
        match TransitionMatrix::from_rows(rows.to_vec())
            .map_err(|e| e.to_string())
            .and_then(|m| mixing_exponent(&m, DEFAULT_MIXING_CAP).map_err(|e| e.to_string()))
        {
            Ok(m) => Diagnostic {
                check: "ergodicity",
                ok: true,
                detail: format!("{name}^m strictly positive at m = {m}"),
            },
            Err(e) => Diagnostic {
                check: "ergodicity",
                ok: false,
                detail: format!("{name}: {e}"),
            },
        }
    };
    let e1 = ergodic(&cfg.p1, "P1");
    let ok1 = e1.ok;
    out.push(e1);
    let e2 = ergodic(&cfg.p2, "P2");
    let ok2 = e2.ok;
    out.push(e2);
    if !(ok1 && ok2) {
        return out;
    }

    let differ = cfg
        .p1
        .iter()
        .zip(&cfg.p2)
        .any(|(r1, r2)| r1.iter().zip(r2).any(|(&a, &b)| (a - b).abs() > 1e-12));
    out.push(Diagnostic {
        check: "distinct laws",
        ok: differ,
        detail: if differ {
            "P1 != P2".into()
        } else {
            "P1 equals P2 entrywise".into()
        },
    });

    let k_ok = cfg.n_arms >= 3;
    out.push(Diagnostic {
        check: "arm count",
        ok: k_ok,
        detail: format!("K = {}", cfg.n_arms),
    });

    let eta_ok = (0.0..=1.0).contains(&cfg.eta);
    out.push(Diagnostic {
        check: "eta range",
        ok: eta_ok,
        detail: format!("eta = {}", cfg.eta),
    });
    out
}

/// FNV-1a of the raw config text, used to stamp outputs.
pub fn config_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = r#"{
        "instance": {
            "n_arms": 3,
            "p1": [[0.9, 0.1], [0.2, 0.8]],
            "p2": [[0.5, 0.5], [0.5, 0.5]],
            "eta": 0.1
        }
    }"#;

    #[test]
    fn canonical_config_parses_and_validates() {
        let cfg = RunConfig::parse_json(CANONICAL).unwrap();
        assert_eq!(cfg.solver.d_cap, 8);
        assert_eq!(cfg.sweep.trials_per_cell, 1000);
        assert_eq!(cfg.sweep.max_steps, 10_000_000);
        let inst = cfg.build_instance().unwrap();
        assert_eq!(inst.n_arms(), 3);
        let diags = diagnostics(&cfg.instance);
        assert!(diags.iter().all(|d| d.ok), "{diags:?}");
        // the discovered mixing exponent is reported
        assert!(diags
            .iter()
            .any(|d| d.check == "ergodicity" && d.detail.contains("m = ")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = CANONICAL.replace("\"eta\": 0.1", "\"eta\": 0.1, \"extra\": 1");
        assert!(RunConfig::parse_json(&bad).is_err());
    }

    #[test]
    fn bad_row_sum_is_named_first() {
        let bad = CANONICAL.replace("[0.9, 0.1]", "[0.9, 0.09]");
        let cfg = RunConfig::parse_json(&bad).unwrap();
        let diags = diagnostics(&cfg.instance);
        let first_bad = diags.iter().find(|d| !d.ok).unwrap();
        assert_eq!(first_bad.check, "stochasticity");
        assert!(cfg.build_instance().is_err());
    }

    #[test]
    fn support_violation_is_detected() {
        let bad = CANONICAL.replace("[0.9, 0.1]", "[1.0, 0.0]");
        let cfg = RunConfig::parse_json(&bad).unwrap();
        let diags = diagnostics(&cfg.instance);
        let first_bad = diags.iter().find(|d| !d.ok).unwrap();
        assert_eq!(first_bad.check, "support");
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }
}
