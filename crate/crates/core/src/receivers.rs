//! Exact evaluation of measurement strategies.
//!
//! An adaptive receiver splits the incoming pulse over `L` layers. Layer `ℓ`
//! taps the fraction `θ₁⋯θ_{ℓ-1}(1-θ_ℓ)` of the energy, displaces it by an
//! amount chosen from the outcomes seen so far and records whether an
//! on/off detector clicked. All `2^L` outcome strings are enumerated, so
//! every probability here is exact.
//!
//! Outcome strings are stored as integers with the first layer's outcome in
//! the most significant bit. The displacement tree is stored in heap order:
//! the entry for an outcome prefix of length `k` with value `p` sits at
//! `2^k − 1 + p`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::states::{ChannelEnsemble, SignalSource};

/// Largest layer count accepted; enumeration cost grows as `2^L`.
pub const MAX_LAYERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuessRule {
    MaximumLikelihood,
    /// Guess for each full outcome string, indexed as described in the module docs.
    Explicit(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StrategyDoc<T>", into = "StrategyDoc<T>", bound = "T: Scalar")]
pub struct ReceiverStrategy<T> {
    layers: usize,
    splits: Vec<T>,
    displacements: Vec<T>,
    guess: GuessRule,
}

/// Heap index of the displacement used after observing `prefix`.
#[inline]
pub fn node_index(prefix_len: usize, prefix_value: usize) -> usize {
    (1 << prefix_len) - 1 + prefix_value
}

/// Binary string for an outcome index, first layer first.
pub fn outcome_label(value: usize, len: usize) -> String {
    (0..len)
        .map(|k| if (value >> (len - 1 - k)) & 1 == 1 { '1' } else { '0' })
        .collect()
}

fn parse_label(label: &str) -> Option<(usize, usize)> {
    let mut value = 0usize;
    for ch in label.chars() {
        value = value.checked_mul(2)?
            + match ch {
                '0' => 0,
                '1' => 1,
                _ => return None,
            };
    }
    Some((label.len(), value))
}

impl<T: Scalar> ReceiverStrategy<T> {
    pub fn new(layers: usize, splits: Vec<T>, displacements: Vec<T>, guess: GuessRule) -> Result<Self> {
        let s = Self {
            layers,
            splits,
            displacements,
            guess,
        };
        s.validate()?;
        Ok(s)
    }

    /// Zero displacements everywhere and ML guessing.
    pub fn zeros(layers: usize, splits: Vec<T>) -> Result<Self> {
        let n = (1usize << layers.min(MAX_LAYERS)) - 1;
        Self::new(layers, splits, vec![T::zero(); n], GuessRule::MaximumLikelihood)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return Err(invalid(
                "layers",
                format!("{} is outside 1..={MAX_LAYERS}", self.layers),
            ));
        }
        if self.splits.len() != self.layers {
            return Err(invalid(
                "splits",
                format!("expected {} entries, got {}", self.layers, self.splits.len()),
            ));
        }
        if let Some(k) = self.splits.iter().position(|t| !(*t >= T::zero() && *t <= T::one())) {
            return Err(invalid(format!("splits[{k}]"), "must lie in [0, 1]"));
        }
        if self.splits[self.layers - 1] != T::zero() {
            return Err(invalid(
                "splits",
                "the last layer must consume the remaining signal (θ_L = 0)",
            ));
        }
        let expected = (1usize << self.layers) - 1;
        if self.displacements.len() != expected {
            return Err(invalid(
                "displacements",
                format!("expected {expected} tree entries, got {}", self.displacements.len()),
            ));
        }
        if self.displacements.iter().any(|b| !b.is_finite()) {
            return Err(invalid("displacements", "entries must be finite"));
        }
        if let GuessRule::Explicit(g) = &self.guess {
            if g.len() != 1 << self.layers {
                return Err(invalid(
                    "guess",
                    format!(
                        "explicit rule must cover {} outcome strings, got {}",
                        1 << self.layers,
                        g.len()
                    ),
                ));
            }
            if g.iter().any(|x| *x > 1) {
                return Err(invalid("guess", "hypotheses are 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn splits(&self) -> &[T] {
        &self.splits
    }

    /// Displacement tree in heap order.
    pub fn displacements(&self) -> &[T] {
        &self.displacements
    }

    pub fn guess_rule(&self) -> &GuessRule {
        &self.guess
    }

    /// Displacement applied at layer `prefix_len + 1` after outcomes `prefix_value`.
    #[inline]
    pub fn displacement(&self, prefix_len: usize, prefix_value: usize) -> T {
        self.displacements[node_index(prefix_len, prefix_value)]
    }

    /// Setters keep the tree shape; values are not range-checked beyond finiteness.
    pub fn set_displacement_at(&mut self, node: usize, value: T) {
        assert!(value.is_finite());
        self.displacements[node] = value;
    }

    /// Sets `θ_layer` (0-based) for a non-final layer.
    pub fn set_split(&mut self, layer: usize, theta: T) {
        assert!(layer + 1 < self.layers, "the final split is pinned to zero");
        assert!(theta >= T::zero() && theta <= T::one());
        self.splits[layer] = theta;
    }

    pub fn with_guess(mut self, guess: GuessRule) -> Result<Self> {
        self.guess = guess;
        self.validate()?;
        Ok(self)
    }
}

/// Equal split for `L = 1` and `θ₁ = 1/2` for two layers; deeper receivers
/// tap equal energy at each layer.
pub fn default_splits<T: Scalar>(layers: usize) -> Vec<T> {
    (0..layers)
        .map(|l| {
            let remaining = layers - l;
            if remaining == 1 {
                T::zero()
            } else {
                // keep (remaining-1)/remaining so each layer sees 1/L of the energy
                T::lit((remaining - 1) as f64 / remaining as f64)
            }
        })
        .collect()
}

/// Kennedy receiver: one layer, full signal, displacement `beta`.
pub fn kennedy_strategy<T: Scalar>(beta: T) -> ReceiverStrategy<T> {
    ReceiverStrategy {
        layers: 1,
        splits: vec![T::zero()],
        displacements: vec![beta],
        guess: GuessRule::MaximumLikelihood,
    }
}

/// Amplitude reaching each detector for input amplitude `a` through a
/// channel of transmissivity `eta`. `a` may be signed.
pub fn layer_amplitudes<T: Scalar>(splits: &[T], a: T, eta: T) -> Vec<T> {
    let received = eta.sqrt() * a;
    let mut kept = T::one();
    splits
        .iter()
        .map(|theta| {
            let amp = (kept * (T::one() - *theta)).sqrt() * received;
            kept = kept * *theta;
            amp
        })
        .collect()
}

/// `(p(no click), p(click))` for a layer amplitude and displacement.
#[inline]
pub fn detector_probability<T: Scalar>(alpha_eff: T, beta: T) -> (T, T) {
    let d = alpha_eff - beta;
    let p0 = (-(d * d)).exp();
    (p0, T::one() - p0)
}

/// `p(j⃗ | x)` for both hypotheses, averaged over channel branches.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDistribution<T> {
    pub layers: usize,
    pub per_hypothesis: [Vec<T>; 2],
}

impl<T: Scalar> OutcomeDistribution<T> {
    pub fn probability(&self, x: usize, outcome: usize) -> T {
        self.per_hypothesis[x][outcome]
    }

    /// ML guess per outcome string; ties resolve to hypothesis 0.
    pub fn ml_guesses(&self, source: &SignalSource<T>) -> Vec<u8> {
        self.per_hypothesis[0]
            .iter()
            .zip(&self.per_hypothesis[1])
            .map(|(p0, p1)| u8::from(source.prior1 * *p1 > source.prior0 * *p0))
            .collect()
    }
}

/// Joint outcome distribution for a single transmitted amplitude.
fn branch_outcomes<T: Scalar>(strategy: &ReceiverStrategy<T>, amps: &[T], out: &mut [T], weight: T) {
    let layers = strategy.layers;
    for (outcome, slot) in out.iter_mut().enumerate() {
        let mut p = weight;
        for (l, amp) in amps.iter().enumerate() {
            let prefix = outcome >> (layers - l);
            let bit = (outcome >> (layers - 1 - l)) & 1;
            let (p0, p1) = detector_probability(*amp, strategy.displacement(l, prefix));
            p = p * if bit == 0 { p0 } else { p1 };
        }
        *slot = *slot + p;
    }
}

/// The channel branch is fixed for the whole pulse, so the average over
/// branches is taken on the joint outcome probability, not per layer.
pub fn outcome_distribution<T: Scalar>(
    strategy: &ReceiverStrategy<T>,
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
) -> OutcomeDistribution<T> {
    let n = 1usize << strategy.layers;
    let per_hypothesis = [0, 1].map(|x| {
        let mut probs = vec![T::zero(); n];
        for b in &channel.branches {
            if b.probability == T::zero() {
                continue;
            }
            let amps = layer_amplitudes(&strategy.splits, source.hypothesis_amplitude(x), b.transmissivity);
            branch_outcomes(strategy, &amps, &mut probs, b.probability);
        }
        probs
    });
    OutcomeDistribution {
        layers: strategy.layers,
        per_hypothesis,
    }
}

pub fn success_probability<T: Scalar>(
    strategy: &ReceiverStrategy<T>,
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
) -> T {
    let dist = outcome_distribution(strategy, source, channel);
    let [p0, p1] = &dist.per_hypothesis;
    match &strategy.guess {
        GuessRule::MaximumLikelihood => p0
            .iter()
            .zip(p1)
            .map(|(a, b)| (source.prior0 * *a).max(source.prior1 * *b))
            .sum(),
        GuessRule::Explicit(g) => g
            .iter()
            .enumerate()
            .map(|(j, &x)| source.prior(x as usize) * dist.probability(x as usize, j))
            .sum(),
    }
}

/// Homodyne detection with the zero-threshold sign rule.
pub fn homodyne_success<T: Scalar>(source: &SignalSource<T>, channel: &ChannelEnsemble<T>) -> Result<T> {
    if (source.prior0 - source.prior1).abs() > T::tol(1e-12) {
        return Err(Error::UnequalPriors {
            prior0: source.prior0.to_f64_lossy(),
        });
    }
    let two = T::lit(2.0);
    let mean_erf: T = channel
        .branches
        .iter()
        .map(|b| b.probability * ((two * b.transmissivity).sqrt() * source.amplitude).erf())
        .sum();
    Ok((T::one() + mean_erf) / two)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct StrategyDoc<T> {
    layers: usize,
    splits: Vec<T>,
    displacements: BTreeMap<String, T>,
    guess: GuessDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GuessDoc {
    Keyword(String),
    Table(BTreeMap<String, u8>),
}

impl<T: Scalar> From<ReceiverStrategy<T>> for StrategyDoc<T> {
    fn from(s: ReceiverStrategy<T>) -> Self {
        let mut displacements = BTreeMap::new();
        for len in 0..s.layers {
            for value in 0..(1usize << len) {
                displacements.insert(outcome_label(value, len), s.displacement(len, value));
            }
        }
        let guess = match &s.guess {
            GuessRule::MaximumLikelihood => GuessDoc::Keyword("ml".into()),
            GuessRule::Explicit(g) => GuessDoc::Table(
                g.iter()
                    .enumerate()
                    .map(|(j, x)| (outcome_label(j, s.layers), *x))
                    .collect(),
            ),
        };
        StrategyDoc {
            layers: s.layers,
            splits: s.splits,
            displacements,
            guess,
        }
    }
}

impl<T: Scalar> TryFrom<StrategyDoc<T>> for ReceiverStrategy<T> {
    type Error = Error;

    fn try_from(doc: StrategyDoc<T>) -> Result<Self> {
        if doc.layers == 0 || doc.layers > MAX_LAYERS {
            return Err(invalid("layers", format!("{} is outside 1..={MAX_LAYERS}", doc.layers)));
        }
        let mut tree: Vec<Option<T>> = vec![None; (1 << doc.layers) - 1];
        for (label, beta) in doc.displacements {
            match parse_label(&label) {
                Some((len, value)) if len < doc.layers => tree[node_index(len, value)] = Some(beta),
                _ => return Err(invalid("displacements", format!("unexpected outcome prefix {label:?}"))),
            }
        }
        let displacements = tree
            .into_iter()
            .enumerate()
            .map(|(node, b)| {
                b.ok_or_else(|| {
                    let len = (node + 1).ilog2() as usize;
                    let value = node + 1 - (1 << len);
                    invalid(
                        "displacements",
                        format!("missing prefix {:?}", outcome_label(value, len)),
                    )
                })
            })
            .collect::<Result<Vec<T>>>()?;
        let guess = match doc.guess {
            GuessDoc::Keyword(k) if k == "ml" => GuessRule::MaximumLikelihood,
            GuessDoc::Keyword(k) => return Err(invalid("guess", format!("unknown rule {k:?}"))),
            GuessDoc::Table(map) => {
                let mut g: Vec<Option<u8>> = vec![None; 1 << doc.layers];
                for (label, x) in map {
                    match parse_label(&label) {
                        Some((len, value)) if len == doc.layers => g[value] = Some(x),
                        _ => return Err(invalid("guess", format!("unexpected outcome string {label:?}"))),
                    }
                }
                GuessRule::Explicit(
                    g.into_iter()
                        .enumerate()
                        .map(|(j, x)| {
                            x.ok_or_else(|| {
                                invalid("guess", format!("missing outcome {:?}", outcome_label(j, doc.layers)))
                            })
                        })
                        .collect::<Result<Vec<u8>>>()?,
                )
            }
        };
        ReceiverStrategy::new(doc.layers, doc.splits, displacements, guess)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::helstrom_bound;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn layer_amplitude_examples() {
        assert_eq!(layer_amplitudes(&[0.0], 0.4, 1.0), vec![0.4]);
        let two = layer_amplitudes(&[0.5, 0.0], 0.4, 1.0);
        assert!(two.iter().all(|a| close(*a, 0.282_842_712_474_619, 1e-15)));
        assert!(layer_amplitudes(&[0.3, 0.8, 0.0], 0.0, 0.7).iter().all(|a| *a == 0.0));
    }

    #[test]
    fn layer_energy_is_conserved() {
        let amps = layer_amplitudes(&[0.3, 0.8, 0.6, 0.0], 0.9, 0.42);
        let energy: f64 = amps.iter().map(|a| a * a).sum();
        assert!(close(energy, 0.42 * 0.81, 1e-15));
    }

    #[test]
    fn detector_examples() {
        assert_eq!(detector_probability(0.4, 0.4), (1.0, 0.0));
        assert_eq!(detector_probability(0.0, 0.0), (1.0, 0.0));
        let (p0, p1) = detector_probability(0.4, -0.4);
        assert!(close(p0, 0.527_292_424_043_048_5, 1e-15));
        assert!(close(p1, 0.472_707_575_956_951_5, 1e-15));
    }

    #[test]
    fn kennedy_nulling() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        let k = kennedy_strategy(-0.4);
        let d = outcome_distribution(&k, &s, &c);
        assert_eq!(d.probability(1, 0), 1.0);
        assert!(close(d.probability(0, 0), 0.527_292_424_043_048_5, 1e-15));
        // ½·1 + ½(1 − e^{−0.64}), i.e. 1 − ½e^{−4a²}
        assert!(close(success_probability(&k, &s, &c), 0.736_353_787_978_475_7, 1e-15));
        assert_eq!(layer_amplitudes(k.splits(), 0.4, 1.0), vec![0.4]);
    }

    #[test]
    fn zero_displacement_kennedy() {
        let s = SignalSource::<f64>::new(0.4, 0.3).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        // both hypotheses click with 1 − e^{−0.16}; the prior decides every outcome
        let got = success_probability(&kennedy_strategy(0.0), &s, &c);
        assert!(close(got, 0.7, 1e-15));
    }

    #[test]
    fn vacuum_gives_coin_flip() {
        let s = SignalSource::<f64>::equiprobable(0.0).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let st = ReceiverStrategy::new(2, vec![0.3, 0.0], vec![0.2, -0.5, 0.9], GuessRule::MaximumLikelihood).unwrap();
        assert!(close(success_probability(&st, &s, &c), 0.5, 1e-15));
        assert_eq!(homodyne_success(&s, &c).unwrap(), 0.5);
    }

    #[test]
    fn joint_average_differs_from_product_of_marginals() {
        let s = SignalSource::<f64>::equiprobable(0.8).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let st = ReceiverStrategy::new(2, vec![0.5, 0.0], vec![0.5, 0.5, 0.5], GuessRule::MaximumLikelihood).unwrap();
        let joint = outcome_distribution(&st, &s, &c);
        // per-layer mixture marginals for x = 0 with no clicks at either layer
        let marginal = |layer: usize| -> f64 {
            c.branches
                .iter()
                .map(|b| {
                    let amps = layer_amplitudes(st.splits(), 0.8, b.transmissivity);
                    b.probability * detector_probability(amps[layer], 0.5).0
                })
                .sum()
        };
        let product = marginal(0) * marginal(1);
        assert!((joint.probability(0, 0b00) - product).abs() > 1e-3);
    }

    #[test]
    fn degenerate_channel_reduces_to_single_channel() {
        let s = SignalSource::<f64>::equiprobable(0.7).unwrap();
        let st = ReceiverStrategy::new(2, vec![0.4, 0.0], vec![0.6, 0.1, 0.9], GuessRule::MaximumLikelihood).unwrap();
        let a = success_probability(&st, &s, &ChannelEnsemble::<f64>::two_point(0.3, 0.3, 0.25).unwrap());
        let b = success_probability(&st, &s, &ChannelEnsemble::<f64>::fixed(0.3).unwrap());
        assert!(close(a, b, 1e-15));
    }

    #[test]
    fn homodyne_operating_point() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let v = homodyne_success(&s, &c).unwrap();
        // scipy erf and Gaussian quadrature both give 0.66001298671529
        assert!(close(v, 0.660_012_986_715_295_3, 1e-12));
        assert!(v <= helstrom_bound(&s, &c).unwrap());
        let big = homodyne_success(
            &SignalSource::<f64>::equiprobable(6.0).unwrap(),
            &ChannelEnsemble::<f64>::fixed(1.0).unwrap(),
        );
        assert!(close(big.unwrap(), 1.0, 1e-15));
    }

    #[test]
    fn homodyne_rejects_unequal_priors() {
        let s = SignalSource::<f64>::new(0.4, 0.6).unwrap();
        let c = ChannelEnsemble::<f64>::fixed(1.0).unwrap();
        assert!(matches!(homodyne_success(&s, &c), Err(Error::UnequalPriors { .. })));
    }

    #[test]
    fn explicit_guess_matches_ml_when_equal() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let st = ReceiverStrategy::new(2, vec![0.5, 0.0], vec![-0.3, 0.2, -0.6], GuessRule::MaximumLikelihood).unwrap();
        let g = outcome_distribution(&st, &s, &c).ml_guesses(&s);
        let explicit = st.clone().with_guess(GuessRule::Explicit(g)).unwrap();
        assert!(close(
            success_probability(&st, &s, &c),
            success_probability(&explicit, &s, &c),
            1e-15
        ));
    }

    #[test]
    fn strategy_validation() {
        assert!(ReceiverStrategy::new(2, vec![0.5, 0.1], vec![0.0; 3], GuessRule::MaximumLikelihood).is_err());
        assert!(ReceiverStrategy::new(2, vec![0.5, 0.0], vec![0.0; 2], GuessRule::MaximumLikelihood).is_err());
        assert!(ReceiverStrategy::new(1, vec![0.0], vec![0.0], GuessRule::Explicit(vec![0])).is_err());
        assert!(ReceiverStrategy::new(1, vec![0.0], vec![0.0], GuessRule::Explicit(vec![0, 2])).is_err());
        assert!(ReceiverStrategy::<f64>::new(0, vec![], vec![], GuessRule::MaximumLikelihood).is_err());
    }

    #[test]
    fn json_format() {
        let st = ReceiverStrategy::new(
            2,
            vec![0.5, 0.0],
            vec![0.1, 0.2, 0.3],
            GuessRule::Explicit(vec![0, 1, 1, 0]),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::to_value(&st).unwrap();
        assert_eq!(v["displacements"][""], 0.1);
        assert_eq!(v["displacements"]["0"], 0.2);
        assert_eq!(v["displacements"]["1"], 0.3);
        assert_eq!(v["guess"]["01"], 1);
        let back: ReceiverStrategy<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, st);

        let ml: ReceiverStrategy<f64> =
            serde_json::from_str(r#"{"layers":1,"splits":[0.0],"displacements":{"":-0.4},"guess":"ml"}"#).unwrap();
        assert_eq!(ml, kennedy_strategy(-0.4));
    }

    #[test]
    fn json_rejects_incomplete_tree() {
        let r: std::result::Result<ReceiverStrategy<f64>, _> =
            serde_json::from_str(r#"{"layers":2,"splits":[0.5,0.0],"displacements":{"":0.1,"0":0.2},"guess":"ml"}"#);
        assert!(r.unwrap_err().to_string().contains("missing prefix \"1\""));
        let r: std::result::Result<ReceiverStrategy<f64>, _> =
            serde_json::from_str(r#"{"layers":1,"splits":[0.0],"displacements":{"":0.1},"guess":"bayes"}"#);
        assert!(r.is_err());
    }

    #[test]
    fn default_split_shapes() {
        assert_eq!(default_splits::<f64>(1), vec![0.0]);
        assert_eq!(default_splits::<f64>(2), vec![0.5, 0.0]);
        let amps = layer_amplitudes(&default_splits::<f64>(4), 1.0, 1.0);
        assert!(amps.iter().all(|a| close(*a, 0.5, 1e-15)));
    }
}
