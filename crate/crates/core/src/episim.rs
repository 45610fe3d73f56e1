//! Stochastic simulation of single transmissions.
//!
//! Each episode draws the bit, then one channel branch that is reused for
//! every layer of the receiver, then one uniform per detector. A policy
//! object decides the displacement before each detection and the final
//! guess.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::receivers::{detector_probability, layer_amplitudes, outcome_distribution, GuessRule, ReceiverStrategy};
use crate::scalar::Scalar;
use crate::states::{ChannelEnsemble, SignalSource};

/// Seeded ChaCha8 generator on an explicit stream, so that `(seed, stream)`
/// pairs give independent, reproducible sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// What the receiver asks its policy for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query<'a> {
    /// Displacement for `layer` (0-based) given the outcomes so far.
    Displacement {
        layer: usize,
        outcomes: &'a [u8],
    },
    Guess {
        outcomes: &'a [u8],
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action<T> {
    /// `index` identifies the choice within a discrete action set, if any.
    Displace {
        value: T,
        index: Option<usize>,
    },
    Guess(u8),
}

pub trait Policy<T> {
    fn act(&mut self, query: Query<'_>) -> Action<T>;
}

impl<T, F: FnMut(Query<'_>) -> Action<T>> Policy<T> for F {
    fn act(&mut self, query: Query<'_>) -> Action<T> {
        self(query)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAction<T> {
    pub displacement: T,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord<T> {
    pub true_bit: u8,
    pub channel_index: usize,
    pub actions: Vec<LayerAction<T>>,
    pub guess: u8,
    pub outcomes: Vec<u8>,
    pub reward: u8,
}

/// Runs one transmission through a receiver with the given splits.
pub fn sample_episode<T: Scalar, P: Policy<T> + ?Sized>(
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    splits: &[T],
    policy: &mut P,
    rng: &mut RngStream,
) -> Result<EpisodeRecord<T>> {
    if splits.is_empty() {
        return Err(invalid("splits", "at least one layer is required"));
    }
    let bit: u8 = if T::lit(rng.gen::<f64>()) < source.prior0 { 0 } else { 1 };
    let u = T::lit(rng.gen::<f64>());
    let mut acc = T::zero();
    let mut channel_index = channel.len() - 1;
    for (i, b) in channel.branches.iter().enumerate() {
        acc = acc + b.probability;
        if u < acc {
            channel_index = i;
            break;
        }
    }
    let amps = layer_amplitudes(
        splits,
        source.hypothesis_amplitude(bit as usize),
        channel.transmissivity(channel_index),
    );

    let mut outcomes = Vec::with_capacity(splits.len());
    let mut actions = Vec::with_capacity(splits.len());
    for (layer, amp) in amps.iter().enumerate() {
        let (displacement, index) = match policy.act(Query::Displacement {
            layer,
            outcomes: &outcomes,
        }) {
            Action::Displace { value, index } if value.is_finite() => (value, index),
            Action::Displace { .. } => {
                return Err(Error::MalformedPolicy(format!(
                    "non-finite displacement at layer {layer}"
                )))
            }
            Action::Guess(_) => {
                return Err(Error::MalformedPolicy(format!(
                    "guess returned where layer {layer} displacement was expected"
                )))
            }
        };
        let (p0, _) = detector_probability(*amp, displacement);
        let outcome = u8::from(T::lit(rng.gen::<f64>()) >= p0);
        outcomes.push(outcome);
        actions.push(LayerAction { displacement, index });
    }
    let guess = match policy.act(Query::Guess { outcomes: &outcomes }) {
        Action::Guess(g) if g <= 1 => g,
        Action::Guess(g) => return Err(Error::MalformedPolicy(format!("guess {g} is not a hypothesis"))),
        Action::Displace { .. } => {
            return Err(Error::MalformedPolicy(
                "displacement returned where a guess was expected".into(),
            ))
        }
    };
    Ok(EpisodeRecord {
        true_bit: bit,
        channel_index,
        actions,
        guess,
        outcomes,
        reward: u8::from(guess == bit),
    })
}

/// Integer value of an outcome prefix, first outcome most significant.
pub fn prefix_value(outcomes: &[u8]) -> usize {
    outcomes.iter().fold(0, |acc, o| (acc << 1) | *o as usize)
}

/// Plays a fixed strategy. ML guesses are resolved once against the exact
/// outcome distribution.
pub struct StrategyPolicy<'a, T> {
    strategy: &'a ReceiverStrategy<T>,
    guesses: Vec<u8>,
}

impl<'a, T: Scalar> StrategyPolicy<'a, T> {
    pub fn new(strategy: &'a ReceiverStrategy<T>, source: &SignalSource<T>, channel: &ChannelEnsemble<T>) -> Self {
        let guesses = match strategy.guess_rule() {
            GuessRule::Explicit(g) => g.clone(),
            GuessRule::MaximumLikelihood => outcome_distribution(strategy, source, channel).ml_guesses(source),
        };
        Self { strategy, guesses }
    }
}

impl<T: Scalar> Policy<T> for StrategyPolicy<'_, T> {
    fn act(&mut self, query: Query<'_>) -> Action<T> {
        match query {
            Query::Displacement { layer, outcomes } => Action::Displace {
                value: self.strategy.displacement(layer, prefix_value(outcomes)),
                index: None,
            },
            Query::Guess { outcomes } => Action::Guess(self.guesses[prefix_value(outcomes)]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub episodes: u64,
}

/// Mean reward of `episodes` simulated transmissions with its binomial
/// standard error `√(p̂(1−p̂)/n)`. When `trace` is given, every episode is
/// written to it as one JSON line.
pub fn monte_carlo_success<T: Scalar>(
    strategy: &ReceiverStrategy<T>,
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    episodes: u64,
    rng: &mut RngStream,
    mut trace: Option<&mut dyn Write>,
) -> Result<MonteCarloEstimate> {
    if episodes == 0 {
        return Err(invalid("episodes", "must be at least 1"));
    }
    let mut policy = StrategyPolicy::new(strategy, source, channel);
    let mut wins = 0u64;
    for _ in 0..episodes {
        let record = sample_episode(source, channel, strategy.splits(), &mut policy, rng)?;
        wins += record.reward as u64;
        if let Some(w) = trace.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    let n = episodes as f64;
    let p = wins as f64 / n;
    Ok(MonteCarloEstimate {
        estimate: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::receivers::{kennedy_strategy, success_probability};

    fn fixed_displacements(betas: Vec<f64>) -> impl FnMut(Query<'_>) -> Action<f64> {
        move |q| match q {
            Query::Displacement { layer, .. } => Action::Displace {
                value: betas[layer],
                index: None,
            },
            Query::Guess { .. } => Action::Guess(0),
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = RngStream::new(9, 0);
                move |_| r.next_u64()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = RngStream::new(9, 0);
                move |_| r.next_u64()
            })
            .collect();
        let c: Vec<u64> = (0..4)
            .map({
                let mut r = RngStream::new(9, 1);
                move |_| r.next_u64()
            })
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn vacuum_never_clicks() {
        let s = SignalSource::<f64>::equiprobable(0.0).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let mut rng = RngStream::new(1, 0);
        let mut policy = fixed_displacements(vec![0.0, 0.0]);
        for _ in 0..1000 {
            let r = sample_episode(&s, &c, &[0.5, 0.0], &mut policy, &mut rng).unwrap();
            assert_eq!(r.outcomes, vec![0, 0]);
        }
    }

    #[test]
    fn nulled_hypothesis_never_clicks() {
        let s = SignalSource::<f64>::new(0.4, 0.0).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let mut rng = RngStream::new(2, 0);
        let mut policy = fixed_displacements(vec![-0.4]);
        for _ in 0..1000 {
            let r = sample_episode(&s, &c, &[0.0], &mut policy, &mut rng).unwrap();
            assert_eq!(r.true_bit, 1);
            assert_eq!(r.outcomes, vec![0]);
            assert_eq!(r.reward, 0);
        }
    }

    #[test]
    fn malformed_policies_are_rejected() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut early_guess = |_: Query<'_>| Action::<f64>::Guess(0);
        assert!(matches!(
            sample_episode(&s, &c, &[0.0], &mut early_guess, &mut rng),
            Err(Error::MalformedPolicy(_))
        ));
        let mut bad_guess = |q: Query<'_>| match q {
            Query::Displacement { .. } => Action::Displace {
                value: 0.0,
                index: None,
            },
            Query::Guess { .. } => Action::Guess(3),
        };
        assert!(sample_episode(&s, &c, &[0.0], &mut bad_guess, &mut rng).is_err());
        let mut nan = |_: Query<'_>| Action::Displace {
            value: f64::NAN,
            index: None,
        };
        assert!(sample_episode(&s, &c, &[0.0], &mut nan, &mut rng).is_err());
    }

    #[test]
    fn episodes_are_deterministic() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let st = ReceiverStrategy::new(2, vec![0.5, 0.0], vec![0.3, -0.2, 0.5], GuessRule::MaximumLikelihood).unwrap();
        let run = || {
            let mut rng = RngStream::new(5, 2);
            let mut p = StrategyPolicy::new(&st, &s, &c);
            (0..50)
                .map(|_| sample_episode(&s, &c, st.splits(), &mut p, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vacuum_monte_carlo_is_a_coin() {
        let s = SignalSource::<f64>::equiprobable(0.0).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let est = monte_carlo_success(&kennedy_strategy(0.0), &s, &c, 10_000, &mut RngStream::new(7, 0), None).unwrap();
        assert!((est.estimate - 0.5).abs() <= 4.0 * est.stderr);
    }

    #[test]
    fn kennedy_monte_carlo_matches_exact() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let k = kennedy_strategy(-0.4);
        let est = monte_carlo_success(&k, &s, &c, 100_000, &mut RngStream::new(11, 0), None).unwrap();
        let exact = success_probability(&k, &s, &c);
        assert!((exact - 0.736_353_787_978_475_7).abs() < 1e-15);
        assert!((est.estimate - exact).abs() <= 4.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn trace_writes_one_line_per_episode() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let mut buf = Vec::new();
        monte_carlo_success(
            &kennedy_strategy(-0.4),
            &s,
            &c,
            25,
            &mut RngStream::new(1, 0),
            Some(&mut buf),
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 25);
        let first: EpisodeRecord<f64> = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.outcomes.len(), 1);
        assert_eq!(first.reward, u8::from(first.guess == first.true_bit));
    }

    #[test]
    fn rejects_zero_episodes() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        assert!(monte_carlo_success(&kennedy_strategy(-0.4), &s, &c, 0, &mut RngStream::new(1, 0), None).is_err());
    }
}
