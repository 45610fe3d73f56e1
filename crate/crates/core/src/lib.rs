//! Discrimination of binary coherent states sent over a channel whose loss
//! changes from one use to the next.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision instantiation used by the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anneal;
pub mod cli;
pub mod episim;
pub mod error;
pub mod linalg;
pub mod qlearn;
pub mod receivers;
pub mod scalar;
pub mod states;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SignalSourceF64 = states::SignalSource<f64>;
pub type ChannelEnsembleF64 = states::ChannelEnsemble<f64>;
pub type ReceiverStrategyF64 = receivers::ReceiverStrategy<f64>;
pub type DisplacementGridF64 = anneal::DisplacementGrid<f64>;

pub type SignalSourceF32 = states::SignalSource<f32>;
pub type ChannelEnsembleF32 = states::ChannelEnsemble<f32>;
pub type ReceiverStrategyF32 = receivers::ReceiverStrategy<f32>;
pub type DisplacementGridF32 = anneal::DisplacementGrid<f32>;
