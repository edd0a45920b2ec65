//! Odd-arm identification in restless Markov multi-armed bandits with a
//! trembling-hand decision maker.
//!
//! One arm (the odd arm) evolves by a transition matrix `P1`, all others by
//! `P2`; every arm advances at every tick whether or not it is selected. The
//! decision maker intends to pull one arm per tick but the hand trembles: with
//! probability `eta` a uniformly random arm is pulled instead. The library
//! provides
//!
//! - the simulator ([`mod@env`]) together with delay / last-observed-state
//!   bookkeeping ([`tracker`]),
//! - incremental log-likelihood-ratio statistics and the threshold stopping
//!   policy ([`llr`], [`policy`]),
//! - a delay-truncated occupancy-measure linear program that computes the
//!   optimal drift constant `r*` and extracts near-optimal sampling tables
//!   ([`solver`]),
//! - a reproducible Monte-Carlo harness for error-rate and stopping-time
//!   sweeps ([`harness`]).
//!
//! All logarithms are natural, so every divergence and log-likelihood ratio
//! is in nats. Arms and states are 0-indexed throughout.

pub mod config;
pub mod env;
pub mod harness;
pub mod llr;
pub mod markov;
pub mod policy;
pub mod rng;
pub mod solver;
pub mod tracker;
