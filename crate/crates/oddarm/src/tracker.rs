//! Delay / last-observed-state bookkeeping for the controlled Markov chain,
//! plus sparse visit and transition counts keyed by delay-capped states.

use crate::env::StepRecord;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("counts table is empty")]
    EmptyTable,
}

/// A point of the controlled chain's state space with delays capped for use
/// as a lookup key: delay vector (exactly one entry is 1) and last observed
/// states.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKey {
    pub delays: Vec<u32>,
    pub states: Vec<usize>,
}

/// The exact controlled-Markov state `(d(t), i(t))`: per-arm delays since the
/// last pull and the state seen at that pull. Exactly one delay equals 1 (the
/// arm pulled at the previous tick); all others are at least 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayState {
    delays: Vec<u32>,
    last_states: Vec<usize>,
}

impl DelayState {
    /// The state right after the warm-up window: the arm observed at offset
    /// `a` of the window has delay `K - a`, so delays read `(K, K-1, ..., 1)`.
    pub fn after_round_robin(records: &[StepRecord]) -> Self {
        let k = records.len();
        let mut delays = vec![0u32; k];
        let mut last_states = vec![0usize; k];
        for (offset, rec) in records.iter().enumerate() {
            delays[rec.actual] = (k - offset) as u32;
            last_states[rec.actual] = rec.observation;
        }
        Self {
            delays,
            last_states,
        }
    }

    pub fn delays(&self) -> &[u32] {
        &self.delays
    }

    pub fn last_states(&self) -> &[usize] {
        &self.last_states
    }

    pub fn delay_of(&self, arm: usize) -> u32 {
        self.delays[arm]
    }

    pub fn last_state_of(&self, arm: usize) -> usize {
        self.last_states[arm]
    }

    /// Applies one observed pull: the pulled arm's delay resets to 1 and its
    /// last state becomes the observation; every other delay grows by 1.
    pub fn update(&mut self, actual: usize, observation: usize) {
        for (arm, d) in self.delays.iter_mut().enumerate() {
            if arm == actual {
                *d = 1;
            } else {
                *d += 1;
            }
        }
        self.last_states[actual] = observation;
    }

    /// The lookup key with every delay clamped to `d_cap`.
    pub fn capped_key(&self, d_cap: u32) -> StateKey {
        StateKey {
            delays: self.delays.iter().map(|&d| d.min(d_cap)).collect(),
            states: self.last_states.clone(),
        }
    }

    /// Invariant check: exactly one delay equals 1 and the rest are >= 2.
    pub fn is_valid(&self) -> bool {
        self.delays.iter().filter(|&&d| d == 1).count() == 1 && self.delays.iter().all(|&d| d >= 1)
    }
}

/// Sparse visit counts `N(n, d, i, a)` and transition counts `N(n, d, i, a, j)`
/// keyed by the delay-capped state. Raw dynamics stay exact; only keys are
/// capped.
#[derive(Debug, Clone)]
pub struct CountsTable {
    d_cap: u32,
    visits: HashMap<(StateKey, usize), u64>,
    transitions: HashMap<(StateKey, usize, usize), u64>,
    horizon: u64,
}

impl CountsTable {
    pub fn new(d_cap: u32) -> Self {
        Self {
            d_cap,
            visits: HashMap::new(),
            transitions: HashMap::new(),
            horizon: 0,
        }
    }

    pub fn d_cap(&self) -> u32 {
        self.d_cap
    }

    /// Number of recorded ticks.
    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Records one tick: the pre-update state, the pulled arm, and the
    /// observed next state of that arm.
    pub fn record(&mut self, state: &DelayState, actual: usize, observation: usize) {
        let key = state.capped_key(self.d_cap);
        *self.visits.entry((key.clone(), actual)).or_insert(0) += 1;
        *self
            .transitions
            .entry((key, actual, observation))
            .or_insert(0) += 1;
        self.horizon += 1;
    }

    pub fn visits(&self) -> &HashMap<(StateKey, usize), u64> {
        &self.visits
    }

    pub fn transitions(&self) -> &HashMap<(StateKey, usize, usize), u64> {
        &self.transitions
    }

    /// Merges another table into this one. Addition of counts is associative
    /// and commutative, so per-worker tables can be combined in any order.
    pub fn merge(&mut self, other: &CountsTable) {
        assert_eq!(self.d_cap, other.d_cap);
        for (k, v) in &other.visits {
            *self.visits.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.transitions {
            *self.transitions.entry(k.clone()).or_insert(0) += v;
        }
        self.horizon += other.horizon;
    }

    /// Normalized state-action frequencies summing to 1.
    pub fn empirical_occupancy(&self) -> Result<OccupancyMeasure, TrackerError> {
        if self.horizon == 0 {
            return Err(TrackerError::EmptyTable);
        }
        let total = self.horizon as f64;
        let nu = self
            .visits
            .iter()
            .map(|((key, arm), &c)| ((key.clone(), *arm), c as f64 / total))
            .collect();
        Ok(OccupancyMeasure { nu })
    }

    /// Normalized state (not state-action) frequencies.
    pub fn empirical_state_occupancy(&self) -> Result<HashMap<StateKey, f64>, TrackerError> {
        if self.horizon == 0 {
            return Err(TrackerError::EmptyTable);
        }
        let total = self.horizon as f64;
        let mut out: HashMap<StateKey, f64> = HashMap::new();
        for ((key, _), &c) in &self.visits {
            *out.entry(key.clone()).or_insert(0.0) += c as f64 / total;
        }
        Ok(out)
    }

    /// Writes counts as CSV rows `d_1..d_K, i_1..i_K, a, j, count`; visit rows
    /// carry an empty `j` column.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let k = self
            .visits
            .keys()
            .next()
            .map(|(key, _)| key.delays.len())
            .unwrap_or(0);
        let d_cols: Vec<String> = (1..=k).map(|i| format!("d_{i}")).collect();
        let i_cols: Vec<String> = (1..=k).map(|i| format!("i_{i}")).collect();
        writeln!(w, "{},{},a,j,count", d_cols.join(","), i_cols.join(","))?;
        let mut rows: Vec<_> = self.visits.iter().collect();
        rows.sort();
        for ((key, arm), count) in rows {
            let d: Vec<String> = key.delays.iter().map(|x| x.to_string()).collect();
            let s: Vec<String> = key.states.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{},{},,{}", d.join(","), s.join(","), arm, count)?;
        }
        let mut rows: Vec<_> = self.transitions.iter().collect();
        rows.sort();
        for ((key, arm, next), count) in rows {
            let d: Vec<String> = key.delays.iter().map(|x| x.to_string()).collect();
            let s: Vec<String> = key.states.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                d.join(","),
                s.join(","),
                arm,
                next,
                count
            )?;
        }
        Ok(())
    }
}

/// Probability mass over state-action pairs `(d, i, a)`: the long-run fraction
/// of ticks spent in `(d, i)` with arm `a` pulled.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    nu: HashMap<(StateKey, usize), f64>,
}

impl OccupancyMeasure {
    pub fn from_map(nu: HashMap<(StateKey, usize), f64>) -> Self {
        Self { nu }
    }

    pub fn mass(&self, key: &StateKey, arm: usize) -> f64 {
        *self.nu.get(&(key.clone(), arm)).unwrap_or(&0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(StateKey, usize), &f64)> {
        self.nu.iter()
    }

    pub fn total_mass(&self) -> f64 {
        self.nu.values().sum()
    }

    /// Mass per state, summed over arms.
    pub fn state_marginal(&self) -> HashMap<StateKey, f64> {
        let mut out: HashMap<StateKey, f64> = HashMap::new();
        for ((key, _), &m) in &self.nu {
            *out.entry(key.clone()).or_insert(0.0) += m;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BanditInstance, EnvState};
    use crate::markov::TransitionMatrix;
    use crate::rng::{stream, stream_rng};
    use rand::Rng;

    fn canonical() -> BanditInstance {
        let p1 = TransitionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let p2 = TransitionMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        BanditInstance::new(3, p1, p2, 0.1, None).unwrap()
    }

    #[test]
    fn update_follows_the_transition_pattern() {
        // delays (3,2,1), pull arm 0, observe j: delays become (1,3,2)
        let mut ds = DelayState {
            delays: vec![3, 2, 1],
            last_states: vec![0, 1, 0],
        };
        ds.update(0, 1);
        assert_eq!(ds.delays(), &[1, 3, 2]);
        assert_eq!(ds.last_states(), &[1, 1, 0]);
        // pulling the arm already at delay 1 keeps it at 1
        let mut ds2 = DelayState {
            delays: vec![3, 2, 1],
            last_states: vec![0, 1, 0],
        };
        ds2.update(2, 0);
        assert_eq!(ds2.delays(), &[4, 3, 1]);
        // non-selected last states unchanged
        assert_eq!(ds2.last_states(), &[0, 1, 0]);
    }

    #[test]
    fn round_robin_yields_descending_delays() {
        let inst = canonical();
        let mut env = EnvState::new(&inst, 0, &mut stream_rng(4, stream::ENV_INIT, 0)).unwrap();
        let mut rng = stream_rng(4, stream::TRIAL, 0);
        let recs = env.forced_round_robin(&inst, &mut rng).unwrap();
        let ds = DelayState::after_round_robin(&recs);
        assert_eq!(ds.delays(), &[3, 2, 1]);
        assert!(ds.is_valid());
    }

    #[test]
    fn delay_invariant_holds_under_fuzzed_updates() {
        let mut rng = stream_rng(77, stream::FUZZ, 0);
        let mut ds = DelayState {
            delays: vec![4, 3, 2, 1],
            last_states: vec![0, 0, 0, 0],
        };
        for _ in 0..100_000 {
            let arm = rng.gen_range(0..4);
            let obs = rng.gen_range(0..2);
            ds.update(arm, obs);
            assert!(ds.is_valid());
            assert_eq!(ds.delay_of(arm), 1);
        }
    }

    #[test]
    fn counts_bookkeeping_identities() {
        let inst = canonical();
        let mut env = EnvState::new(&inst, 1, &mut stream_rng(6, stream::ENV_INIT, 0)).unwrap();
        let mut rng = stream_rng(6, stream::TRIAL, 0);
        let recs = env.forced_round_robin(&inst, &mut rng).unwrap();
        let mut ds = DelayState::after_round_robin(&recs);
        let mut counts = CountsTable::new(8);

        let n_ticks = 5_000u64;
        for i in 0..n_ticks {
            let rec = env.step(&inst, (i % 3) as usize, &mut rng);
            counts.record(&ds, rec.actual, rec.observation);
            ds.update(rec.actual, rec.observation);
        }
        // with n = K-1+n_ticks total ticks, counts sum to n - K + 1
        assert_eq!(counts.horizon(), n_ticks);
        let total: u64 = counts.visits().values().sum();
        assert_eq!(total, n_ticks);
        // per-key transition counts sum to the visit count
        for ((key, arm), &v) in counts.visits() {
            let s: u64 = counts
                .transitions()
                .iter()
                .filter(|((k2, a2, _), _)| k2 == key && a2 == arm)
                .map(|(_, &c)| c)
                .sum();
            assert_eq!(s, v);
        }
        // occupancy sums to 1
        let occ = counts.empirical_occupancy().unwrap();
        assert!((occ.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raw_delays_are_capped_in_keys() {
        let ds = DelayState {
            delays: vec![23, 1, 4],
            last_states: vec![0, 1, 1],
        };
        let key = ds.capped_key(8);
        assert_eq!(key.delays, vec![8, 1, 4]);
    }

    #[test]
    fn single_record_is_a_point_mass() {
        let mut counts = CountsTable::new(8);
        let ds = DelayState {
            delays: vec![3, 2, 1],
            last_states: vec![0, 1, 0],
        };
        counts.record(&ds, 0, 1);
        let occ = counts.empirical_occupancy().unwrap();
        assert!((occ.mass(&ds.capped_key(8), 0) - 1.0).abs() < 1e-15);
        assert!((occ.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_table_errors() {
        let counts = CountsTable::new(8);
        assert!(matches!(
            counts.empirical_occupancy(),
            Err(TrackerError::EmptyTable)
        ));
    }

    #[test]
    fn recorded_delays_cover_window_lengths() {
        // over a window in which arm a is pulled at both endpoints, the sum of
        // its recorded delays equals the window length
        let inst = canonical();
        let mut env = EnvState::new(&inst, 0, &mut stream_rng(15, stream::ENV_INIT, 0)).unwrap();
        let mut rng = stream_rng(15, stream::TRIAL, 0);
        let recs = env.forced_round_robin(&inst, &mut rng).unwrap();
        let mut ds = DelayState::after_round_robin(&recs);

        let arm = 1usize;
        let mut delays_of_arm: Vec<(u64, u32)> = Vec::new(); // (tick index, delay at pull)
        for i in 0..2_000u64 {
            let rec = env.step(&inst, rng.gen_range(0..3), &mut rng);
            if rec.actual == arm {
                delays_of_arm.push((i, ds.delay_of(arm)));
            }
            ds.update(rec.actual, rec.observation);
        }
        for pair in delays_of_arm.windows(2) {
            let (t0, _) = pair[0];
            let (t1, d1) = pair[1];
            assert_eq!((t1 - t0) as u32, d1);
        }
    }

    #[test]
    fn merge_is_order_insensitive() {
        let ds = DelayState {
            delays: vec![3, 2, 1],
            last_states: vec![0, 1, 0],
        };
        let mut a = CountsTable::new(8);
        let mut b = CountsTable::new(8);
        a.record(&ds, 0, 1);
        a.record(&ds, 2, 0);
        b.record(&ds, 0, 1);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.horizon(), ba.horizon());
        assert_eq!(ab.visits(), ba.visits());
        assert_eq!(ab.transitions(), ba.transitions());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ds = DelayState {
            delays: vec![3, 2, 1],
            last_states: vec![0, 1, 0],
        };
        let mut counts = CountsTable::new(8);
        counts.record(&ds, 0, 1);
        let mut buf = Vec::new();
        counts.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "d_1,d_2,d_3,i_1,i_2,i_3,a,j,count");
        assert_eq!(lines.next().unwrap(), "3,2,1,0,1,0,0,,1");
        assert_eq!(lines.next().unwrap(), "3,2,1,0,1,0,0,1,1");
    }
}
