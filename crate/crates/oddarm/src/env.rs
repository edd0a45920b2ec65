//! The restless bandit environment: a hidden odd arm, per-arm Markov
//! evolution at every tick, a trembling-hand action channel, and observation
//! of the selected arm's current state.
//!
//! Timing convention: at each tick every already-observed chain advances one
//! step first, then the selected arm's state is observed. An arm's first
//! observation is its initial-law draw itself (hypothesis-independent by
//! construction); an arm re-selected after delay `d` is governed exactly by
//! the `d`-step transition law.

use crate::markov::{mixing_exponent, TransitionMatrix, DEFAULT_MIXING_CAP};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("need at least 3 arms, got {0}")]
    TooFewArms(usize),
    #[error("P1 and P2 must differ in some entry by more than 1e-12")]
    LawsEqual,
    #[error("P1 and P2 must share a support pattern (P1(j|i)>0 iff P2(j|i)>0)")]
    SupportMismatch,
    #[error("state space sizes differ: P1 has {0}, P2 has {1}")]
    StateSpaceMismatch(usize, usize),
    #[error("{which} is not ergodic: {source}")]
    NotErgodic {
        which: &'static str,
        source: crate::markov::MarkovError,
    },
    #[error("eta must lie in [0,1], got {0}")]
    BadEta(f64),
    #[error("initial law is not a probability vector over {expected} states")]
    BadInitLaw { expected: usize },
    #[error("odd arm index {0} out of range for {1} arms")]
    BadOddArm(usize, usize),
    #[error("operation requires clock {expected}, environment is at {actual}")]
    WrongClock { expected: u64, actual: u64 },
}

/// How the mandatory one-observation-per-arm warm-up is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    /// Pull arms 0..K-1 in order at times 0..K-1, bypassing the trembling
    /// channel for those K pulls.
    #[default]
    Forced,
    /// Pull uniformly at random until the last K pulls are 0..K-1 in order;
    /// observations before that window are discarded.
    Resample,
}

/// Full problem description: arm count, the two transition laws, trembling
/// parameter, and the hypothesis-independent initial state law.
#[derive(Debug, Clone)]
pub struct BanditInstance {
    n_arms: usize,
    p1: TransitionMatrix,
    p2: TransitionMatrix,
    eta: f64,
    init_law: Vec<f64>,
    mixing_exponent: u32,
}

impl BanditInstance {
    /// Validates every instance assumption: K >= 3, shared state space,
    /// P1 != P2, identical support patterns, ergodicity of both laws, and a
    /// proper initial law. `init_law = None` means uniform.
    pub fn new(
        n_arms: usize,
        p1: TransitionMatrix,
        p2: TransitionMatrix,
        eta: f64,
        init_law: Option<Vec<f64>>,
    ) -> Result<Self, EnvError> {
        if n_arms < 3 {
            return Err(EnvError::TooFewArms(n_arms));
        }
        if p1.n_states() != p2.n_states() {
            return Err(EnvError::StateSpaceMismatch(p1.n_states(), p2.n_states()));
        }
        if p1.max_abs_diff(&p2) <= 1e-12 {
            return Err(EnvError::LawsEqual);
        }
        if !p1.same_support(&p2) {
            return Err(EnvError::SupportMismatch);
        }
        let m1 =
            mixing_exponent(&p1, DEFAULT_MIXING_CAP).map_err(|source| EnvError::NotErgodic {
                which: "P1",
                source,
            })?;
        let m2 =
            mixing_exponent(&p2, DEFAULT_MIXING_CAP).map_err(|source| EnvError::NotErgodic {
                which: "P2",
                source,
            })?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(EnvError::BadEta(eta));
        }
        let s = p1.n_states();
        let init_law = match init_law {
            None => vec![1.0 / s as f64; s],
            Some(v) => {
                let ok = v.len() == s
                    && v.iter().all(|&p| p >= 0.0 && p.is_finite())
                    && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
                if !ok {
                    return Err(EnvError::BadInitLaw { expected: s });
                }
                v
            }
        };
        Ok(Self {
            n_arms,
            p1,
            p2,
            eta,
            init_law,
            mixing_exponent: m1.max(m2),
        })
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn n_states(&self) -> usize {
        self.p1.n_states()
    }

    pub fn p1(&self) -> &TransitionMatrix {
        &self.p1
    }

    pub fn p2(&self) -> &TransitionMatrix {
        &self.p2
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn init_law(&self) -> &[f64] {
        &self.init_law
    }

    /// Smallest exponent making both `P1^m` and `P2^m` strictly positive.
    pub fn mixing_exponent(&self) -> u32 {
        self.mixing_exponent
    }

    /// The law of arm `arm` when `odd_arm` is the odd one.
    pub fn matrix_for(&self, odd_arm: usize, arm: usize) -> &TransitionMatrix {
        if arm == odd_arm {
            &self.p1
        } else {
            &self.p2
        }
    }
}

/// One tick of interaction: intended arm, actually pulled arm, and the
/// observed state of the pulled arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub intended: usize,
    pub actual: usize,
    pub observation: usize,
}

/// Samples an index from a probability vector.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The trembling-hand channel: returns `intended` with probability `1 - eta`
/// and a uniformly random arm with probability `eta`, so the marginal is
/// `P(actual = a | intended = b) = eta/K + (1-eta)·1{a=b}`.
pub fn tremble<R: Rng>(intended: usize, n_arms: usize, eta: f64, rng: &mut R) -> usize {
    if eta > 0.0 && rng.gen::<f64>() < eta {
        rng.gen_range(0..n_arms)
    } else {
        intended
    }
}

/// The hidden environment state: which arm is odd, each arm's current hidden
/// state, and a tick counter.
///
/// An arm sits at its initial-law draw until its first observation — the
/// value seen then *is* that draw, so first observations carry no hypothesis
/// information (the initial law is hypothesis-independent). From the tick
/// after its first observation onward the arm advances once per tick, which
/// makes an arm re-observed after delay `d` follow exactly the `d`-step law.
#[derive(Debug, Clone)]
pub struct EnvState {
    odd_arm: usize,
    true_states: Vec<usize>,
    observed_once: Vec<bool>,
    clock: u64,
}

impl EnvState {
    /// Draws each arm's initial hidden state independently from the instance's
    /// initial law. The clock starts at 0.
    pub fn new<R: Rng>(
        instance: &BanditInstance,
        odd_arm: usize,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        if odd_arm >= instance.n_arms() {
            return Err(EnvError::BadOddArm(odd_arm, instance.n_arms()));
        }
        let true_states = (0..instance.n_arms())
            .map(|_| sample_categorical(instance.init_law(), rng))
            .collect();
        Ok(Self {
            odd_arm,
            true_states,
            observed_once: vec![false; instance.n_arms()],
            clock: 0,
        })
    }

    pub fn odd_arm(&self) -> usize {
        self.odd_arm
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn true_states(&self) -> &[usize] {
        self.true_states.as_slice()
    }

    fn tick<R: Rng>(
        &mut self,
        instance: &BanditInstance,
        actual: usize,
        rng: &mut R,
    ) -> StepRecord {
        for (arm, state) in self.true_states.iter_mut().enumerate() {
            if self.observed_once[arm] {
                let p = instance.matrix_for(self.odd_arm, arm);
                *state = sample_categorical(p.row(*state), rng);
            }
        }
        self.observed_once[actual] = true;
        let observation = self.true_states[actual];
        let t = self.clock;
        self.clock += 1;
        StepRecord {
            t,
            intended: actual, // overwritten by callers that tremble
            actual,
            observation,
        }
    }

    /// One tick: the intended arm passes through the trembling channel, every
    /// already-observed chain advances one step by its own law, and the pulled
    /// arm's state is observed. After the warm-up every arm has been observed,
    /// so all K chains advance at every tick.
    pub fn step<R: Rng>(
        &mut self,
        instance: &BanditInstance,
        intended: usize,
        rng: &mut R,
    ) -> StepRecord {
        let actual = tremble(intended, instance.n_arms(), instance.eta(), rng);
        let mut rec = self.tick(instance, actual, rng);
        rec.intended = intended;
        rec
    }

    /// The warm-up that gives every arm one observation: arms 0..K-1 at times
    /// 0..K-1. With [`Warmup::Forced`] the trembling channel is bypassed for
    /// these K pulls; with [`Warmup::Resample`] uniform pulls are drawn until
    /// the last K of them are 0..K-1 in order and earlier pulls are discarded.
    ///
    /// Errors with `WrongClock` unless the clock is 0.
    pub fn warmup<R: Rng>(
        &mut self,
        instance: &BanditInstance,
        mode: Warmup,
        rng: &mut R,
    ) -> Result<Vec<StepRecord>, EnvError> {
        if self.clock != 0 {
            return Err(EnvError::WrongClock {
                expected: 0,
                actual: self.clock,
            });
        }
        let k = instance.n_arms();
        match mode {
            Warmup::Forced => {
                let mut records = Vec::with_capacity(k);
                for arm in 0..k {
                    records.push(self.tick(instance, arm, rng));
                }
                Ok(records)
            }
            Warmup::Resample => {
                let mut window: Vec<StepRecord> = Vec::with_capacity(k);
                loop {
                    let actual = rng.gen_range(0..k);
                    let rec = self.tick(instance, actual, rng);
                    if actual == window.len() {
                        window.push(rec);
                    } else {
                        window.clear();
                        if actual == 0 {
                            window.push(rec);
                        }
                    }
                    if window.len() == k {
                        return Ok(window);
                    }
                }
            }
        }
    }

    /// Convenience alias for the default forced warm-up.
    pub fn forced_round_robin<R: Rng>(
        &mut self,
        instance: &BanditInstance,
        rng: &mut R,
    ) -> Result<Vec<StepRecord>, EnvError> {
        self.warmup(instance, Warmup::Forced, rng)
    }
}
