//! Offline optimization of adaptive receivers.
//!
//! [`anneal_displacements`] runs Metropolis simulated annealing over the
//! displacement tree (and optionally the beam-splitter ratios), maximizing
//! the exact success probability with maximum-likelihood guessing.
//! [`grid_search`] enumerates every tree over a finite displacement grid and
//! serves as the exhaustive reference for the discretized problem.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episim::RngStream;
use crate::error::{invalid, Error, Result};
use crate::receivers::{success_probability, GuessRule, ReceiverStrategy, MAX_LAYERS};
use crate::scalar::Scalar;
use crate::states::{ChannelEnsemble, SignalSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub initial_temperature: f64,
    pub cooling_rate: f64,
    pub steps_per_temperature: usize,
    pub proposal_stddev: f64,
    pub temperature_floor: f64,
    pub restarts: usize,
    pub optimize_splits: bool,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            initial_temperature: 0.1,
            cooling_rate: 0.98,
            steps_per_temperature: 200,
            proposal_stddev: 0.1,
            temperature_floor: 1e-5,
            restarts: 8,
            optimize_splits: false,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_temperature > 0.0) {
            return Err(invalid("anneal.initial_temperature", "must be positive"));
        }
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return Err(invalid("anneal.cooling_rate", "must lie in (0, 1)"));
        }
        if self.steps_per_temperature == 0 {
            return Err(invalid("anneal.steps_per_temperature", "must be at least 1"));
        }
        if !(self.proposal_stddev > 0.0) {
            return Err(invalid("anneal.proposal_stddev", "must be positive"));
        }
        if !(self.temperature_floor > 0.0) {
            return Err(invalid("anneal.temperature_floor", "must be positive"));
        }
        if self.restarts == 0 {
            return Err(invalid("anneal.restarts", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of temperature levels visited per restart.
    pub fn temperature_levels(&self) -> usize {
        let mut t = self.initial_temperature;
        let mut n = 0;
        while t >= self.temperature_floor {
            n += 1;
            t *= self.cooling_rate;
        }
        n
    }
}

/// One run-log row, written at the end of each temperature level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealLogRow {
    pub restart: usize,
    pub step: usize,
    pub temperature: f64,
    pub current: f64,
    pub best: f64,
}

#[derive(Clone, Debug)]
pub struct AnnealOutcome<T> {
    pub strategy: ReceiverStrategy<T>,
    pub success: T,
    pub log: Vec<AnnealLogRow>,
}

/// Displacements are searched in `±(DISPLACEMENT_RANGE·a + DISPLACEMENT_MARGIN)`.
/// The margin matters for weak signals, where the optimal nulling
/// displacement tends to about 0.71 rather than scaling with `a`.
pub const DISPLACEMENT_RANGE: f64 = 3.0;
pub const DISPLACEMENT_MARGIN: f64 = 1.0;

/// Smallest step of the final coordinate polish.
const POLISH_MIN_STEP: f64 = 1e-10;

struct Problem<'a, T> {
    source: &'a SignalSource<T>,
    channel: &'a ChannelEnsemble<T>,
    bound: T,
    n_displacements: usize,
    n_splits: usize,
}

impl<T: Scalar> Problem<'_, T> {
    fn dims(&self) -> usize {
        self.n_displacements + self.n_splits
    }

    fn range(&self, k: usize) -> (T, T) {
        if k < self.n_displacements {
            (-self.bound, self.bound)
        } else {
            (T::zero(), T::one())
        }
    }

    fn get(&self, s: &ReceiverStrategy<T>, k: usize) -> T {
        if k < self.n_displacements {
            s.displacements()[k]
        } else {
            s.splits()[k - self.n_displacements]
        }
    }

    fn set(&self, s: &mut ReceiverStrategy<T>, k: usize, v: T) {
        let (lo, hi) = self.range(k);
        let v = v.max(lo).min(hi);
        if k < self.n_displacements {
            s.set_displacement_at(k, v);
        } else {
            s.set_split(k - self.n_displacements, v);
        }
    }

    fn value(&self, s: &ReceiverStrategy<T>) -> T {
        success_probability(s, self.source, self.channel)
    }
}

/// Pattern search around the annealed optimum: try `±step` on each
/// coordinate, keep strict improvements, halve the step when none helps.
fn polish<T: Scalar>(problem: &Problem<'_, T>, s: &mut ReceiverStrategy<T>, value: &mut T, start: f64) {
    let mut step = start;
    while step >= POLISH_MIN_STEP {
        let mut improved = false;
        for k in 0..problem.dims() {
            for dir in [1.0, -1.0] {
                let old = problem.get(s, k);
                problem.set(s, k, old + T::lit(dir * step));
                let v = problem.value(s);
                if v > *value {
                    *value = v;
                    improved = true;
                } else {
                    problem.set(s, k, old);
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
}

fn anneal_restart<T: Scalar>(
    problem: &Problem<'_, T>,
    template: &ReceiverStrategy<T>,
    config: &AnnealConfig,
    restart: usize,
) -> (ReceiverStrategy<T>, T, Vec<AnnealLogRow>) {
    let mut rng = RngStream::new(config.seed, restart as u64);
    let normal = Normal::new(0.0, config.proposal_stddev).expect("validated stddev");
    let mut current = template.clone();
    for k in 0..problem.dims() {
        let (lo, hi) = problem.range(k);
        let u = T::lit(rng.gen::<f64>());
        problem.set(&mut current, k, lo + (hi - lo) * u);
    }
    let mut current_value = problem.value(&current);
    let mut best = current.clone();
    let mut best_value = current_value;
    let mut log = Vec::with_capacity(config.temperature_levels());

    let mut temperature = config.initial_temperature;
    let mut step = 0;
    while temperature >= config.temperature_floor {
        for _ in 0..config.steps_per_temperature {
            step += 1;
            let k = rng.gen_range(0..problem.dims());
            let old = problem.get(&current, k);
            problem.set(&mut current, k, old + T::lit(normal.sample(&mut rng)));
            let proposed = problem.value(&current);
            let delta = (proposed - current_value).to_f64_lossy();
            let u: f64 = rng.gen();
            if delta >= 0.0 || u < (delta / temperature).exp() {
                current_value = proposed;
                if current_value > best_value {
                    best_value = current_value;
                    best = current.clone();
                }
            } else {
                problem.set(&mut current, k, old);
            }
        }
        log.push(AnnealLogRow {
            restart,
            step,
            temperature,
            current: current_value.to_f64_lossy(),
            best: best_value.to_f64_lossy(),
        });
        temperature *= config.cooling_rate;
    }
    polish(problem, &mut best, &mut best_value, config.proposal_stddev);
    (best, best_value, log)
}

/// Maximizes the ML success probability of an `layers`-layer receiver.
/// Restarts run in parallel, each on its own RNG stream; the result is the
/// best restart (lowest index on ties), so output depends only on the seed.
pub fn anneal_displacements<T: Scalar>(
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    layers: usize,
    splits: &[T],
    config: &AnnealConfig,
) -> Result<AnnealOutcome<T>> {
    config.validate()?;
    source.validate()?;
    channel.validate()?;
    let template = ReceiverStrategy::zeros(layers, splits.to_vec())?;
    let problem = Problem {
        source,
        channel,
        bound: T::lit(DISPLACEMENT_RANGE) * source.amplitude + T::lit(DISPLACEMENT_MARGIN),
        n_displacements: template.displacements().len(),
        n_splits: if config.optimize_splits { layers - 1 } else { 0 },
    };

    let runs: Vec<_> = (0..config.restarts)
        .into_par_iter()
        .map(|r| anneal_restart(&problem, &template, config, r))
        .collect();

    let mut log = Vec::new();
    let mut winner: Option<(ReceiverStrategy<T>, T)> = None;
    for (strategy, value, rows) in runs {
        log.extend(rows);
        if winner.as_ref().is_none_or(|(_, v)| value > *v) {
            winner = Some((strategy, value));
        }
    }
    let (strategy, success) = winner.expect("at least one restart");
    Ok(AnnealOutcome { strategy, success, log })
}

/// Ordered set of displacement values available to discretized receivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>", bound = "T: Scalar")]
pub struct DisplacementGrid<T> {
    values: Vec<T>,
}

pub const DEFAULT_GRID_POINTS: usize = 10;

impl<T: Scalar> DisplacementGrid<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("grid", "must contain at least one value"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid", "values must be finite"));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("grid", "values must be strictly increasing"));
        }
        Ok(Self { values })
    }

    /// `points` equally spaced values on `[min, max]`.
    pub fn linspace(min: T, max: T, points: usize) -> Result<Self> {
        if points == 1 {
            return Self::new(vec![min]);
        }
        let span = max - min;
        let last = T::lit((points.max(1) - 1) as f64);
        Self::new((0..points).map(|k| min + span * T::lit(k as f64) / last).collect())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, index: usize) -> T {
        self.values[index]
    }
}

impl<T: Scalar> Default for DisplacementGrid<T> {
    fn default() -> Self {
        Self::linspace(-T::one(), T::one(), DEFAULT_GRID_POINTS).expect("valid default grid")
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for DisplacementGrid<T> {
    type Error = Error;
    fn try_from(values: Vec<T>) -> Result<Self> {
        Self::new(values)
    }
}

impl<T> From<DisplacementGrid<T>> for Vec<T> {
    fn from(g: DisplacementGrid<T>) -> Self {
        g.values
    }
}

pub const GRID_SEARCH_LIMIT: u64 = 10_000_000;

#[derive(Clone, Debug)]
pub struct GridSearchOutcome<T> {
    pub strategy: ReceiverStrategy<T>,
    pub success: T,
    pub evaluated: u64,
}

/// Tree of grid indices for configuration `index`, root entry most
/// significant, so increasing `index` is lexicographic order on the tuple.
fn decode_configuration(mut index: u64, base: u64, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = (index % base) as usize;
        index /= base;
    }
}

/// Exhaustive search over all displacement trees drawn from `grid`.
pub fn grid_search<T: Scalar>(
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    grid: &DisplacementGrid<T>,
    layers: usize,
    splits: &[T],
) -> Result<GridSearchOutcome<T>> {
    if layers == 0 || layers > MAX_LAYERS {
        return Err(invalid("layers", format!("{layers} is outside 1..={MAX_LAYERS}")));
    }
    let nodes = (1usize << layers) - 1;
    let configurations = (grid.len() as f64).powi(nodes as i32);
    if configurations > GRID_SEARCH_LIMIT as f64 {
        return Err(Error::SearchSpaceTooLarge {
            configurations,
            limit: GRID_SEARCH_LIMIT,
        });
    }
    let total = (grid.len() as u64).pow(nodes as u32);
    let template = ReceiverStrategy::zeros(layers, splits.to_vec())?;
    let base = grid.len() as u64;

    const CHUNK: u64 = 4096;
    let chunks = total.div_ceil(CHUNK);
    let (best_index, best_value, evaluated) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s = template.clone();
            let mut digits = vec![0usize; nodes];
            let mut local: Option<(u64, T)> = None;
            let end = ((c + 1) * CHUNK).min(total);
            for index in c * CHUNK..end {
                decode_configuration(index, base, &mut digits);
                for (node, d) in digits.iter().enumerate() {
                    s.set_displacement_at(node, grid.value(*d));
                }
                let v = success_probability(&s, source, channel);
                if local.is_none_or(|(_, best)| v > best) {
                    local = Some((index, v));
                }
            }
            let (i, v) = local.expect("nonempty chunk");
            (i, v, end - c * CHUNK)
        })
        .reduce(
            || (u64::MAX, T::neg_infinity(), 0),
            |a, b| {
                let pick = if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a };
                (pick.0, pick.1, a.2 + b.2)
            },
        );

    let mut digits = vec![0usize; nodes];
    decode_configuration(best_index, base, &mut digits);
    let displacements = digits.iter().map(|d| grid.value(*d)).collect();
    let strategy = ReceiverStrategy::new(layers, splits.to_vec(), displacements, GuessRule::MaximumLikelihood)?;
    Ok(GridSearchOutcome {
        strategy,
        success: best_value,
        evaluated,
    })
}
