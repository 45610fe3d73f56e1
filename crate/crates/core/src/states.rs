//! Coherent-state geometry and the quantum limit for discriminating the two
//! channel-averaged BPSK hypotheses.
//!
//! The four received states `|√η_i α_x⟩` are indexed `m = x + 2i`. Their
//! span is four-dimensional, so every operator built from them can be
//! represented exactly by 4×4 real matrices through the symmetric square
//! root of their Gram matrix. That representation is the production route
//! for [`helstrom_bound`]; [`helstrom_fock_oracle`] recomputes the same
//! quantity in a truncated photon-number basis with an unrelated
//! eigensolver and exists to cross-check it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigen, trace_norm, SquareMatrix};
use crate::scalar::Scalar;

/// Binary phase-shift keyed source: hypothesis `x` is sent as `(-1)^x a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSource<T> {
    pub amplitude: T,
    pub prior0: T,
    pub prior1: T,
}

impl<T: Scalar> SignalSource<T> {
    pub fn new(amplitude: T, prior0: T) -> Result<Self> {
        Self::with_priors(amplitude, prior0, T::one() - prior0)
    }

    pub fn equiprobable(amplitude: T) -> Result<Self> {
        Self::new(amplitude, T::lit(0.5))
    }

    pub fn with_priors(amplitude: T, prior0: T, prior1: T) -> Result<Self> {
        let s = Self {
            amplitude,
            prior0,
            prior1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= T::zero()) || !self.amplitude.is_finite() {
            return Err(invalid(
                "source.amplitude",
                format!("{} is not a finite nonnegative real", self.amplitude),
            ));
        }
        for (name, p) in [("source.prior0", self.prior0), ("source.prior1", self.prior1)] {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(invalid(name, format!("{p} is not a probability")));
            }
        }
        if (self.prior0 + self.prior1 - T::one()).abs() > T::tol(1e-12) {
            return Err(invalid(
                "source.prior0",
                format!("priors sum to {}, expected 1", self.prior0 + self.prior1),
            ));
        }
        Ok(())
    }

    /// Transmitted amplitude `α_x = (-1)^x a`.
    #[inline]
    pub fn hypothesis_amplitude(&self, x: usize) -> T {
        if x == 0 {
            self.amplitude
        } else {
            -self.amplitude
        }
    }

    #[inline]
    pub fn prior(&self, x: usize) -> T {
        if x == 0 {
            self.prior0
        } else {
            self.prior1
        }
    }

    pub fn with_amplitude(&self, amplitude: T) -> Self {
        Self { amplitude, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBranch<T> {
    pub transmissivity: T,
    pub probability: T,
}

/// Lossy channel whose transmissivity is drawn per use from a two-point
/// distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEnsemble<T> {
    pub branches: Vec<ChannelBranch<T>>,
}

pub const CHANNEL_BRANCHES: usize = 2;

impl<T: Scalar> ChannelEnsemble<T> {
    pub fn new(branches: Vec<ChannelBranch<T>>) -> Result<Self> {
        let c = Self { branches };
        c.validate()?;
        Ok(c)
    }

    /// `η₀` with probability `pi0`, `η₁` otherwise.
    pub fn two_point(eta0: T, eta1: T, pi0: T) -> Result<Self> {
        Self::new(vec![
            ChannelBranch {
                transmissivity: eta0,
                probability: pi0,
            },
            ChannelBranch {
                transmissivity: eta1,
                probability: T::one() - pi0,
            },
        ])
    }

    /// Non-fading channel of transmissivity `eta`.
    pub fn fixed(eta: T) -> Result<Self> {
        Self::two_point(eta, eta, T::one())
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != CHANNEL_BRANCHES {
            return Err(invalid(
                "channel.branches",
                format!("expected {CHANNEL_BRANCHES} branches, got {}", self.branches.len()),
            ));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if !(b.transmissivity >= T::zero() && b.transmissivity <= T::one()) {
                return Err(invalid(
                    format!("channel.branches[{i}].transmissivity"),
                    format!("{} is outside [0, 1]", b.transmissivity),
                ));
            }
            if !(b.probability >= T::zero() && b.probability <= T::one()) {
                return Err(invalid(
                    format!("channel.branches[{i}].probability"),
                    format!("{} is outside [0, 1]", b.probability),
                ));
            }
        }
        let total: T = self.branches.iter().map(|b| b.probability).sum();
        if (total - T::one()).abs() > T::tol(1e-12) {
            return Err(invalid(
                "channel.branches[].probability",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        Ok(())
    }

    pub fn transmissivity(&self, i: usize) -> T {
        self.branches[i].transmissivity
    }

    pub fn probability(&self, i: usize) -> T {
        self.branches[i].probability
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

/// Index of `|√η_i α_x⟩` among the four received states.
#[inline]
pub fn state_index(x: usize, branch: usize) -> usize {
    x + 2 * branch
}

/// Amplitude of received state `m = x + 2i`.
pub fn received_amplitude<T: Scalar>(source: &SignalSource<T>, channel: &ChannelEnsemble<T>, m: usize) -> T {
    let (x, i) = (m % 2, m / 2);
    channel.transmissivity(i).sqrt() * source.hypothesis_amplitude(x)
}

/// `⟨α|β⟩` for real amplitudes.
#[inline]
pub fn coherent_overlap<T: Scalar>(alpha: T, beta: T) -> T {
    let d = alpha - beta;
    (-(d * d) * T::lit(0.5)).exp()
}

/// Gram matrix `G_mn = ⟨ψ_m|ψ_n⟩` of the four received states.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T>(SquareMatrix<T>);

impl<T: Scalar> GramMatrix<T> {
    pub fn entry(&self, m: usize, n: usize) -> T {
        self.0[(m, n)]
    }

    pub fn matrix(&self) -> &SquareMatrix<T> {
        &self.0
    }
}

pub fn gram_matrix<T: Scalar>(source: &SignalSource<T>, channel: &ChannelEnsemble<T>) -> GramMatrix<T> {
    let amps: Vec<T> = (0..4).map(|m| received_amplitude(source, channel, m)).collect();
    GramMatrix(SquareMatrix::from_fn(4, |m, n| coherent_overlap(amps[m], amps[n])))
}

/// Columns of `B = √G`: real 4-vectors with the same inner products as the
/// received states.
#[derive(Clone, Debug)]
pub struct StateEmbedding<T> {
    root: SquareMatrix<T>,
}

impl<T: Scalar> StateEmbedding<T> {
    pub fn vector(&self, m: usize) -> Vec<T> {
        self.root.column(m)
    }

    pub fn root(&self) -> &SquareMatrix<T> {
        &self.root
    }

    /// `BᵀB`, which must reproduce the Gram matrix.
    pub fn gram(&self) -> SquareMatrix<T> {
        self.root.transpose().matmul(&self.root)
    }
}

/// Eigenvalues in `[-CLAMP, 0)` are rounding noise from rank deficiency.
pub const PSD_CLAMP: f64 = 1e-8;

pub fn embedding<T: Scalar>(g: &GramMatrix<T>) -> Result<StateEmbedding<T>> {
    let eig = symmetric_eigen(g.matrix());
    let n = eig.values.len();
    let min = eig.values.iter().copied().fold(T::infinity(), T::min);
    if min < -T::tol(PSD_CLAMP) {
        return Err(Error::InvalidGram {
            min_eigenvalue: min.to_f64_lossy(),
        });
    }
    let roots: Vec<T> = eig.values.iter().map(|l| l.max(T::zero()).sqrt()).collect();
    let v = &eig.vectors;
    let root = SquareMatrix::from_fn(n, |i, j| (0..n).map(|k| v[(i, k)] * roots[k] * v[(j, k)]).sum());
    Ok(StateEmbedding { root })
}

/// Optimal average success probability `(1 + ‖q₀ρ₀ − q₁ρ₁‖₁)/2` over all
/// measurements, with `ρ_x` averaged over the channel branches.
pub fn helstrom_bound<T: Scalar>(source: &SignalSource<T>, channel: &ChannelEnsemble<T>) -> Result<T> {
    let b = embedding(&gram_matrix(source, channel))?;
    let mut delta = SquareMatrix::zeros(4);
    for x in 0..2 {
        for i in 0..2 {
            let sign = if x == 0 { T::one() } else { -T::one() };
            let w = sign * source.prior(x) * channel.probability(i);
            let v = b.vector(state_index(x, i));
            for r in 0..4 {
                for c in 0..4 {
                    delta[(r, c)] = delta[(r, c)] + w * v[r] * v[c];
                }
            }
        }
    }
    Ok((T::one() + trace_norm(&delta)) * T::lit(0.5))
}

/// Closed-form Helstrom bound for two pure states `|±√η a⟩`.
pub fn pure_helstrom<T: Scalar>(a: T, eta: T, q0: T) -> T {
    let overlap_sq = (-T::lit(4.0) * eta * a * a).exp();
    let disc = T::one() - T::lit(4.0) * q0 * (T::one() - q0) * overlap_sq;
    (T::one() + disc.max(T::zero()).sqrt()) * T::lit(0.5)
}

/// Tail mass above which a truncated Fock vector is reported as inaccurate.
pub const FOCK_DEFICIT_WARNING: f64 = 1e-10;

pub const DEFAULT_FOCK_CUTOFF: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FockEstimate {
    pub value: f64,
    /// Largest `1 − ‖ψ_truncated‖²` among the four states, before renormalization.
    pub max_norm_deficit: f64,
}

impl FockEstimate {
    pub fn truncation_warning(&self) -> bool {
        self.max_norm_deficit > FOCK_DEFICIT_WARNING
    }
}

/// Truncated photon-number components of `|α⟩`, renormalized, plus the
/// discarded tail mass.
pub fn fock_vector(alpha: f64, n_max: usize) -> (Vec<f64>, f64) {
    let mut c = Vec::with_capacity(n_max + 1);
    let mut term = (-alpha * alpha / 2.0).exp();
    c.push(term);
    for n in 1..=n_max {
        term *= alpha / (n as f64).sqrt();
        c.push(term);
    }
    let norm_sq: f64 = c.iter().map(|x| x * x).sum();
    let deficit = (1.0 - norm_sq).max(0.0);
    let norm = norm_sq.sqrt();
    for x in &mut c {
        *x /= norm;
    }
    (c, deficit)
}

/// Helstrom bound evaluated in the photon-number basis truncated at
/// `n_max` photons, with nalgebra's symmetric eigensolver.
pub fn helstrom_fock_oracle<T: Scalar>(
    source: &SignalSource<T>,
    channel: &ChannelEnsemble<T>,
    n_max: usize,
) -> Result<FockEstimate> {
    if n_max < 1 {
        return Err(invalid("n_max", "must be at least 1"));
    }
    let dim = n_max + 1;
    let mut delta = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut max_deficit = 0.0f64;
    for x in 0..2 {
        for i in 0..2 {
            let amp = received_amplitude(source, channel, state_index(x, i)).to_f64_lossy();
            let (v, deficit) = fock_vector(amp, n_max);
            max_deficit = max_deficit.max(deficit);
            let sign = if x == 0 { 1.0 } else { -1.0 };
            let w = sign * source.prior(x).to_f64_lossy() * channel.probability(i).to_f64_lossy();
            let v = nalgebra::DVector::from_vec(v);
            delta += w * &v * v.transpose();
        }
    }
    if max_deficit > FOCK_DEFICIT_WARNING {
        log::warn!("Fock truncation at n_max = {n_max} discards tail mass {max_deficit:e}; increase n_max");
    }
    let norm: f64 = delta.symmetric_eigenvalues().iter().map(|l| l.abs()).sum();
    Ok(FockEstimate {
        value: (1.0 + norm) / 2.0,
        max_norm_deficit: max_deficit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn operating_point() -> (SignalSource<f64>, ChannelEnsemble<f64>) {
        (
            SignalSource::<f64>::equiprobable(0.4).unwrap(),
            ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap(),
        )
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(coherent_overlap(0.4f64, 0.4), 1.0);
        assert_eq!(coherent_overlap(0.0, 0.0), 1.0);
        assert!((coherent_overlap(0.4f64, -0.4) - 0.726_149_037_073_690_9).abs() < 1e-15);
    }

    #[test]
    fn overlap_matches_fock_inner_product() {
        let (u, _) = fock_vector(0.4, 40);
        let (v, _) = fock_vector(-0.4, 40);
        let inner: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((inner - coherent_overlap(0.4f64, -0.4)).abs() < 1e-15);
    }

    #[test]
    fn gram_entries_at_operating_point() {
        let (s, c) = operating_point();
        let g = gram_matrix(&s, &c);
        assert!((g.entry(0, 1) - 0.726_149_037_073_690_9).abs() < 1e-15);
        // ψ0 = |0.4⟩, ψ2 = |0.04⟩
        assert!((g.entry(0, 2) - 0.937_254_895_612_677_7).abs() < 1e-15);
        assert!(g.matrix().is_symmetric(0.0));
        for m in 0..4 {
            assert_eq!(g.entry(m, m), 1.0);
        }
    }

    #[test]
    fn vacuum_gram_is_all_ones() {
        let s = SignalSource::<f64>::equiprobable(0.0).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let g = gram_matrix(&s, &c);
        assert!((0..4).all(|m| (0..4).all(|n| g.entry(m, n) == 1.0)));
        let b = embedding(&g).unwrap();
        assert!(b.gram().max_abs_diff(g.matrix()) < 1e-12);
        let eig = symmetric_eigen(b.root());
        assert!((eig.values[3] - 2.0).abs() < 1e-12);
        assert!(eig.values[..3].iter().all(|l| l.abs() < 1e-7));
    }

    #[test]
    fn identity_embeds_to_identity() {
        let g = GramMatrix(SquareMatrix::<f64>::identity(4));
        let b = embedding(&g).unwrap();
        assert!(b.root().max_abs_diff(&SquareMatrix::identity(4)) < 1e-15);
    }

    #[test]
    fn embedding_reconstructs_gram() {
        let (s, c) = operating_point();
        let g = gram_matrix(&s, &c);
        let b = embedding(&g).unwrap();
        assert!(b.gram().max_abs_diff(g.matrix()) < 1e-10);
    }

    #[test]
    fn non_psd_gram_is_rejected() {
        let g = GramMatrix(SquareMatrix::<f64>::from_fn(4, |i, j| if i == j { 1.0 } else { -0.9 }));
        assert!(matches!(embedding(&g), Err(Error::InvalidGram { .. })));
    }

    #[test]
    fn helstrom_examples() {
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let zero = SignalSource::<f64>::equiprobable(0.0).unwrap();
        assert!((helstrom_bound(&zero, &c).unwrap() - 0.5).abs() < 1e-12);

        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let pure = helstrom_bound(&s, &ChannelEnsemble::<f64>::fixed(1.0).unwrap()).unwrap();
        assert!((pure - 0.843_768_663_477_691).abs() < 1e-12);

        let mixed = helstrom_bound(&s, &c).unwrap();
        let oracle = helstrom_fock_oracle(&s, &c, 30).unwrap();
        assert!((mixed - oracle.value).abs() < 1e-8);
        // numpy: 31-dim Fock representation, eigvalsh
        assert!((mixed - 0.691_832_591_559_792_3).abs() < 1e-10);
    }

    #[test]
    fn pure_formula_edge_cases() {
        assert!((pure_helstrom(0.4f64, 1.0, 0.5) - 0.843_768_663_477_691).abs() < 1e-12);
        assert_eq!(pure_helstrom(0.0f64, 1.0, 0.3), 0.7);
        assert_eq!(pure_helstrom(0.9f64, 0.0, 0.8), 0.8);
    }

    #[test]
    fn fock_oracle_examples() {
        let s = SignalSource::<f64>::equiprobable(0.4).unwrap();
        let v = helstrom_fock_oracle(&s, &ChannelEnsemble::<f64>::fixed(1.0).unwrap(), 30).unwrap();
        assert!((v.value - 0.843_768_663_477_691).abs() < 1e-9);
        assert!(!v.truncation_warning());

        let z = SignalSource::<f64>::equiprobable(0.0).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        let v = helstrom_fock_oracle(&z, &c, 5).unwrap();
        assert!((v.value - 0.5).abs() < 1e-15);

        assert!(helstrom_fock_oracle(&s, &c, 0).is_err());
    }

    #[test]
    fn fock_oracle_flags_short_truncation() {
        let s = SignalSource::<f64>::equiprobable(1.5).unwrap();
        let c = ChannelEnsemble::<f64>::two_point(1.0, 0.01, 0.5).unwrap();
        assert!(helstrom_fock_oracle(&s, &c, 2).unwrap().truncation_warning());
        assert!(!helstrom_fock_oracle(&s, &c, 30).unwrap().truncation_warning());
    }

    #[test]
    fn label_swap_symmetry() {
        let c = ChannelEnsemble::<f64>::two_point(0.7, 0.05, 0.3).unwrap();
        let s = SignalSource::<f64>::new(0.6, 0.35).unwrap();
        let swapped = SignalSource::<f64>::new(0.6, 0.65).unwrap();
        // Swapping q and the sign of α maps ρ_x to ρ_{1-x}; the Gram matrix of
        // a globally negated constellation is identical, so only the priors move.
        let a = helstrom_bound(&s, &c).unwrap();
        let b = helstrom_bound(&swapped, &c).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn validation_errors() {
        assert!(SignalSource::<f64>::new(-0.1, 0.5).is_err());
        assert!(SignalSource::<f64>::with_priors(0.4, 0.5, 0.6).is_err());
        assert!(ChannelEnsemble::<f64>::two_point(1.2, 0.01, 0.5).is_err());
        let err = ChannelEnsemble::<f64>::new(vec![
            ChannelBranch {
                transmissivity: 1.0,
                probability: 0.5,
            },
            ChannelBranch {
                transmissivity: 0.1,
                probability: 0.4,
            },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("probability"));
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let s = SignalSource::<f32>::equiprobable(0.4).unwrap();
        let c = ChannelEnsemble::<f32>::two_point(1.0, 0.01, 0.5).unwrap();
        let v = helstrom_bound(&s, &c).unwrap();
        assert!((v as f64 - 0.691_832_591_559_792_3).abs() < 2e-5);
    }
}
