//! Adaptive identification of nonlinear time-delay systems from output
//! measurements.
//!
//! The crate simulates plants of the form
//!
//! ```text
//! dx/dt = Σᵢ [Aᵢ x(t−τᵢ) + Dᵢ φ(x(t−τᵢ)) + Gᵢ ψ(y(t−τᵢ)) + Bᵢ u(t−τᵢ)],   y = Cx
//! ```
//!
//! and estimates the unknown rows of `Aᵢ, Dᵢ, Gᵢ, Bᵢ` along a known direction
//! `T0` with a Lyapunov–Krasovskii based adaptive identifier.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmark;
pub mod cli;
pub mod config;
pub mod dde;
pub mod error;
pub mod identifier;
pub mod io;
pub mod lmi;
pub mod model;
pub mod plot;
pub mod signals;

pub use error::{Error, Result};
