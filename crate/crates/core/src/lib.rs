//! Numerical laboratory for held-action Bellman operators.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: control problems (coefficients, discounting, declared constants)
//!   and the builtin problem [`catalog`].
//! - [`grid`]: the grid function space used to represent Q-functions
//!   (point-sampling encoder, multilinear decoder, norms, Lipschitz scans).
//! - [`trajectory`]: Euler–Maruyama simulation of held-action dynamics, the
//!   Monte-Carlo Bellman estimator and the one-step BSDE estimator.
//! - [`bellman`]: the reference Bellman operator on grid functions, value
//!   iteration and regularity checks.
//! - [`net`]: a from-scratch MLP operator block trained to approximate the
//!   residual operator `B - I`.
//! - [`stack`]: the residual stack `Q_{l+1} = Q_l + F(Q_l)` with per-layer
//!   error accounting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod catalog;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod net;
pub mod rng;
pub mod stack;
pub mod trajectory;

pub use error::{Error, Result};

/// Version stamped into every emitted artifact.
pub const ARTIFACT_VERSION: &str = concat!("bellnet/", env!("CARGO_PKG_VERSION"));
