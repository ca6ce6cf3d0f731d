//! Finite-truncation construction of time quasi-periodic solutions of the
//! nonlinear Schrödinger equation on the torus, with the resonance and
//! genericity machinery behind it and independent oracles that check it.

pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod genericity;
pub mod lattice;
pub mod linop;
pub mod newton;
pub mod oracle;
pub mod resonance;

pub use error::{Error, ExcisionTest, Result};
pub use field::{build_initial, convolve, conv_power, residual_f, FourierSeq, SolverState, TailSpec};
pub use lattice::{box_enumerate, weight_value, weighted_norm, ModeIndex, TruncBox, Weight};
