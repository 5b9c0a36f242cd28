//! Quantitative MRI reconstruction of proton density and relaxation-time maps
//! (ρ, T1, T2) from undersampled, noisy k-space data.
//!
//! The reconstruction minimizes a data-fidelity term built on a time-discrete
//! Bloch simulation, a gradient penalty and a per-channel patch-based orthogonal
//! dictionary prior. The solver alternates between dictionary-learning steps
//! run to an adaptive inner accuracy and box-constrained Levenberg–Marquardt
//! steps with backtracking.
//!
//! Module overview:
//!
//! - [`bloch`]: discrete Bloch recursion, signal map and its analytic Jacobian.
//! - [`forward`]: sampling masks, orthonormal Fourier operator, patch and
//!   finite-difference operators, linearized forward operator.
//! - [`dictlearn`]: orthogonal dictionary learning with descent certificates.
//! - [`solver`]: objective, box QP, backtracking and the nested/one-step/LM drivers.
//! - [`data`]: phantom, masks, noisy data synthesis, metrics, persistence and
//!   the experiment runner.
//! - [`cli`]: the `qmri` command-line front end.

// NaN inputs must fail validation, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bloch;
pub mod cli;
pub mod config;
pub mod data;
pub mod dictlearn;
pub mod error;
pub mod forward;
pub mod solver;

pub use error::{Error, Result};
