//! Tabular Q-learning over receiver histories.
//!
//! The agent never sees the amplitude, the channel or any probability. At
//! each layer it picks a displacement from a finite grid, observes the
//! detector, and after the last layer guesses the bit; only the guess is
//! rewarded. The decision state is the full history of its own actions
//! and observations, which turns the partially observed problem into a
//! finite tree-shaped MDP that a table can represent exactly.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anneal::DisplacementGrid;
use crate::episim::{sample_episode, Action, Query, RngStream};
use crate::error::{invalid, Error, Result};
use crate::receivers::{node_index, success_probability, GuessRule, ReceiverStrategy};
use crate::scalar::Scalar;
use crate::states::{ChannelEnsemble, SignalSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    Action(usize),
    Outcome(u8),
}

/// Alternating record `a₀, o₁, a₁, o₂, …` of one episode so far.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryState(Vec<Step>);

impl HistoryState {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn steps(&self) -> &[Step] {
        &self.0
    }

    pub fn outcomes_seen(&self) -> usize {
        self.0.iter().filter(|s| matches!(s, Step::Outcome(_))).count()
    }

    /// `self` followed by `action` and the outcome it produced.
    pub fn extend(&self, action: usize, outcome: u8) -> Self {
        let mut steps = self.0.clone();
        steps.push(Step::Action(action));
        steps.push(Step::Outcome(outcome));
        Self(steps)
    }

    /// History built from the actions taken and outcomes seen, pairwise.
    pub fn from_pairs(actions: &[usize], outcomes: &[u8]) -> Self {
        debug_assert_eq!(actions.len(), outcomes.len());
        Self(
            actions
                .iter()
                .zip(outcomes)
                .flat_map(|(a, o)| [Step::Action(*a), Step::Outcome(*o)])
                .collect(),
        )
    }

    fn is_alternating(&self) -> bool {
        self.0
            .chunks(2)
            .all(|pair| matches!(pair, [Step::Action(_), Step::Outcome(_)]))
    }
}

impl fmt::Display for HistoryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, step) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("|")?;
            }
            match step {
                Step::Action(a) => write!(f, "a{a}")?,
                Step::Outcome(o) => write!(f, "o{o}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for HistoryState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self::root());
        }
        let steps = s
            .split('|')
            .map(|tok| {
                let bad = || invalid("history", format!("bad token {tok:?} in {s:?}"));
                match tok.split_at_checked(1) {
                    Some(("a", n)) => n.parse().map(Step::Action).map_err(|_| bad()),
                    Some(("o", "0")) => Ok(Step::Outcome(0)),
                    Some(("o", "1")) => Ok(Step::Outcome(1)),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let h = Self(steps);
        if !h.is_alternating() {
            return Err(invalid("history", format!("{s:?} does not alternate action/outcome")));
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    pub value: f64,
    pub visits: u64,
}

/// Value estimates for every (history, action) pair touched so far.
/// Untouched pairs read as `init_value` with zero visits.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    layers: usize,
    grid_len: usize,
    init_value: f64,
    entries: HashMap<HistoryState, Vec<QEntry>>,
}

pub const GUESS_ACTIONS: usize = 2;

impl QTable {
    pub fn new(layers: usize, grid_len: usize, init_value: f64) -> Self {
        Self {
            layers,
            grid_len,
            init_value,
            entries: HashMap::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    /// True once every layer has been measured.
    pub fn is_guess_stage(&self, h: &HistoryState) -> bool {
        h.outcomes_seen() >= self.layers
    }

    pub fn action_count(&self, h: &HistoryState) -> usize {
        if self.is_guess_stage(h) {
            GUESS_ACTIONS
        } else {
            self.grid_len
        }
    }

    pub fn get(&self, h: &HistoryState, action: usize) -> QEntry {
        self.entries.get(h).map(|row| row[action]).unwrap_or(QEntry {
            value: self.init_value,
            visits: 0,
        })
    }

    pub fn values(&self, h: &HistoryState) -> Vec<f64> {
        match self.entries.get(h) {
            Some(row) => row.iter().map(|e| e.value).collect(),
            None => vec![self.init_value; self.action_count(h)],
        }
    }

    /// Greedy action at `h`; ties go to the lowest index.
    pub fn argmax(&self, h: &HistoryState) -> usize {
        argmax_lowest(&self.values(h))
    }

    pub fn max_value(&self, h: &HistoryState) -> f64 {
        self.values(h).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    fn entry_mut(&mut self, h: &HistoryState, action: usize) -> &mut QEntry {
        let n = self.action_count(h);
        let init = self.init_value;
        let row = self
            .entries
            .entry(h.clone())
            .or_insert_with(|| vec![QEntry { value: init, visits: 0 }; n]);
        &mut row[action]
    }

    /// Number of histories with at least one stored entry.
    pub fn touched_states(&self) -> usize {
        self.entries.len()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (&HistoryState, usize, &QEntry)> {
        self.entries
            .iter()
            .flat_map(|(h, row)| row.iter().enumerate().map(move |(a, e)| (h, a, e)))
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LearningRate {
    Constant {
        value: f64,
    },
    /// `1/N(s,a)` with the count taken after the current visit.
    VisitCount,
    /// `N(s,a)^(−exponent)`, exponent in (0.5, 1]. Below 1 it forgets the
    /// stale bootstrap targets seen early in training.
    Polynomial {
        exponent: f64,
    },
}

pub const DEFAULT_RATE_EXPONENT: f64 = 0.7;

/// `ε(t) = max(floor, initial · e^{−t/decay})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub initial: f64,
    /// Decay constant in episodes; `None` means one fifth of the run.
    pub decay: Option<f64>,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            decay: None,
            floor: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Scalar")]
pub struct QLearnConfig<T> {
    pub episodes: u64,
    pub discount: f64,
    pub learning_rate: LearningRate,
    pub epsilon: EpsilonSchedule,
    pub grid: DisplacementGrid<T>,
    pub init_value: f64,
    /// Greedy success probability is evaluated every `record_stride` episodes.
    pub record_stride: u64,
}

impl<T: Scalar> Default for QLearnConfig<T> {
    fn default() -> Self {
        Self {
            episodes: 500_000,
            discount: 1.0,
            learning_rate: LearningRate::Polynomial {
                exponent: DEFAULT_RATE_EXPONENT,
            },
            epsilon: EpsilonSchedule::default(),
            grid: DisplacementGrid::default(),
            init_value: 0.0,
            record_stride: 100,
        }
    }
}

impl<T: Scalar> QLearnConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(invalid("rl.discount", "must lie in [0, 1]"));
        }
        if let LearningRate::Constant { value } = self.learning_rate {
            if !(value > 0.0 && value <= 1.0) {
                return Err(invalid("rl.learning_rate.value", "must lie in (0, 1]"));
            }
        }
        if let LearningRate::Polynomial { exponent } = self.learning_rate {
            if !(exponent > 0.5 && exponent <= 1.0) {
                return Err(invalid("rl.learning_rate.exponent", "must lie in (0.5, 1]"));
            }
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.initial) {
            return Err(invalid("rl.epsilon.initial", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.floor) {
            return Err(invalid("rl.epsilon.floor", "must lie in [0, 1]"));
        }
        if let Some(tau) = e.decay {
            if !(tau > 0.0) {
                return Err(invalid("rl.epsilon.decay", "must be positive"));
            }
        }
        if self.record_stride == 0 {
            return Err(invalid("rl.record_stride", "must be at least 1"));
        }
        if !self.init_value.is_finite() {
            return Err(invalid("rl.init_value", "must be finite"));
        }
        Ok(())
    }

    pub fn decay_constant(&self) -> f64 {
        self.epsilon
            .decay
            .unwrap_or_else(|| (self.episodes as f64 / 5.0).max(1.0))
    }
}

pub fn epsilon_value<T: Scalar>(config: &QLearnConfig<T>, t: u64) -> f64 {
    let e = &config.epsilon;
    (e.initial * (-(t as f64) / config.decay_constant()).exp()).max(e.floor)
}

/// ε-greedy choice at `h`. One uniform is always drawn so the stream
/// advances identically whatever ε is.
pub fn select_action<R: Rng + ?Sized>(q: &QTable, h: &HistoryState, epsilon: f64, rng: &mut R) -> usize {
    let n = q.action_count(h);
    let u: f64 = rng.gen();
    if u < epsilon {
        rng.gen_range(0..n)
    } else {
        q.argmax(h)
    }
}

/// One Q-learning step; `next = None` marks a terminal transition.
pub fn q_update<T: Scalar>(
    q: &mut QTable,
    s: &HistoryState,
    action: usize,
    reward: f64,
    next: Option<&HistoryState>,
    config: &QLearnConfig<T>,
) {
    let bootstrap = next.map_or(0.0, |h| q.max_value(h));
    let target = reward + config.discount * bootstrap;
    let entry = q.entry_mut(s, action);
    entry.visits += 1;
    let rate = match config.learning_rate {
        LearningRate::Constant { value } => value,
        LearningRate::VisitCount => 1.0 / entry.visits as f64,
        LearningRate::Polynomial { exponent } => (entry.visits as f64).powf(-exponent),
    };
    entry.value = (1.0 - rate) * entry.value + rate * target;
}

/// The deterministic policy currently preferred by `q`, as a receiver with
/// explicit guesses.
pub fn greedy_strategy<T: Scalar>(q: &QTable, grid: &DisplacementGrid<T>, splits: &[T]) -> Result<ReceiverStrategy<T>> {
    let layers = splits.len();
    if layers != q.layers() {
        return Err(invalid(
            "splits",
            format!("table has {} layers, splits {layers}", q.layers()),
        ));
    }
    let mut displacements = vec![T::zero(); (1 << layers) - 1];
    let mut guesses = vec![0u8; 1 << layers];
    // (history, prefix length, prefix value)
    let mut stack = vec![(HistoryState::root(), 0usize, 0usize)];
    while let Some((h, len, value)) = stack.pop() {
        if len == layers {
            guesses[value] = q.argmax(&h) as u8;
            continue;
        }
        let a = q.argmax(&h);
        displacements[node_index(len, value)] = grid.value(a);
        for o in 0..2u8 {
            stack.push((h.extend(a, o), len + 1, (value << 1) | o as usize));
        }
    }
    ReceiverStrategy::new(layers, splits.to_vec(), displacements, GuessRule::Explicit(guesses))
}

/// Per-agent random streams: one drives the physics, one the exploration.
#[derive(Clone, Debug)]
pub struct AgentStreams {
    pub environment: RngStream,
    pub exploration: RngStream,
}

impl AgentStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            environment: RngStream::new(seed, 0),
            exploration: RngStream::new(seed, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub cumulative_return: f64,
    pub greedy_success: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Last recorded greedy success probability.
    pub fn final_success(&self) -> Option<f64> {
        self.points.iter().rev().find_map(|p| p.greedy_success)
    }

    pub fn final_return(&self) -> Option<f64> {
        self.points.last().map(|p| p.cumulative_return)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "episode,R_t,P_t")?;
        for p in &self.points {
            let pt = p.greedy_success.map(format_probability).unwrap_or_default();
            writeln!(w, "{},{},{}", p.episode, format_probability(p.cumulative_return), pt)?;
        }
        Ok(())
    }
}

/// Fixed-point rendering with 12 significant digits.
pub fn format_probability(x: f64) -> String {
    const DIGITS: i32 = 12;
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if magnitude < -4 {
        return format!("{x:.prec$e}", prec = (DIGITS - 1) as usize);
    }
    let decimals = (DIGITS - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Running mean `R_t = (1/t) Σ_{i≤t} r_i`.
pub fn cumulative_return(rewards: &[u8]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid("rewards", "must be nonempty"));
    }
    let mut total = 0u64;
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            total += *r as u64;
            total as f64 / (i + 1) as f64
        })
        .collect())
}

/// Trains one agent for `config.episodes` episodes.
///
/// Updates are applied when the episode ends, in layer order. Histories in
/// one episode are distinct tree nodes, so this gives exactly the values an
/// online update after every step would.
pub fn train<T: Scalar>(
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    splits: &[T],
    config: &QLearnConfig<T>,
    streams: &mut AgentStreams,
) -> Result<(QTable, LearningCurve)> {
    config.validate()?;
    let layers = splits.len();
    ReceiverStrategy::zeros(layers, splits.to_vec())?;
    let mut q = QTable::new(layers, config.grid.len(), config.init_value);
    let mut curve = LearningCurve {
        points: Vec::with_capacity(config.episodes as usize),
    };
    let mut wins = 0u64;

    for t in 0..config.episodes {
        let epsilon = epsilon_value(config, t);
        let record = {
            let table = &q;
            let explore = &mut streams.exploration;
            let mut chosen: Vec<usize> = Vec::with_capacity(layers);
            let mut policy = |query: Query<'_>| match query {
                Query::Displacement { outcomes, .. } => {
                    let h = HistoryState::from_pairs(&chosen, outcomes);
                    let a = select_action(table, &h, epsilon, explore);
                    chosen.push(a);
                    Action::Displace {
                        value: config.grid.value(a),
                        index: Some(a),
                    }
                }
                Query::Guess { outcomes } => {
                    let h = HistoryState::from_pairs(&chosen, outcomes);
                    Action::Guess(select_action(table, &h, epsilon, explore) as u8)
                }
            };
            sample_episode(source, channel, splits, &mut policy, &mut streams.environment)?
        };

        let actions: Vec<usize> = record
            .actions
            .iter()
            .map(|a| a.index.expect("agent records grid indices"))
            .collect();
        let mut path = vec![HistoryState::root()];
        for (a, o) in actions.iter().zip(&record.outcomes) {
            let next = path[path.len() - 1].extend(*a, *o);
            path.push(next);
        }
        // Terminal first, so each layer bootstraps from a freshly updated successor.
        q_update(
            &mut q,
            &path[layers],
            record.guess as usize,
            record.reward as f64,
            None,
            config,
        );
        for l in (0..layers).rev() {
            q_update(&mut q, &path[l], actions[l], 0.0, Some(&path[l + 1]), config);
        }

        wins += record.reward as u64;
        let episode = t + 1;
        let greedy_success = if episode % config.record_stride == 0 || episode == config.episodes {
            let g = greedy_strategy(&q, &config.grid, splits)?;
            Some(success_probability(&g, source, channel).to_f64_lossy())
        } else {
            None
        };
        curve.points.push(CurvePoint {
            episode,
            cumulative_return: wins as f64 / episode as f64,
            greedy_success,
        });
    }
    Ok((q, curve))
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTableCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub layers: usize,
    pub grid_len: usize,
    pub init_value: f64,
    /// `(history, action, value, visits)`, sorted by history then action.
    pub entries: Vec<(String, usize, f64, u64)>,
}

/// FNV-1a over the canonical JSON of the config, as 16 hex digits.
pub fn config_fingerprint<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{hash:016x}"))
}

impl QTable {
    pub fn to_checkpoint(&self, config_hash: String) -> QTableCheckpoint {
        let mut rows: Vec<(&HistoryState, usize, &QEntry)> = self.iter_entries().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)));
        QTableCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash,
            layers: self.layers,
            grid_len: self.grid_len,
            init_value: self.init_value,
            entries: rows
                .into_iter()
                .map(|(h, a, e)| (h.to_string(), a, e.value, e.visits))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &QTableCheckpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(invalid(
                "format_version",
                format!("unsupported checkpoint version {}", c.format_version),
            ));
        }
        let mut q = QTable::new(c.layers, c.grid_len, c.init_value);
        for (h, a, value, visits) in &c.entries {
            let h: HistoryState = h.parse()?;
            if h.outcomes_seen() > c.layers || *a >= q.action_count(&h) {
                return Err(invalid("entries", format!("action {a} is not available at {h:?}")));
            }
            *q.entry_mut(&h, *a) = QEntry {
                value: *value,
                visits: *visits,
            };
        }
        Ok(q)
    }
}
