//! Constrained exponential-utility portfolio optimization and utility
//! indifference pricing via quadratic BSDEs.
//!
//! The crate solves the backward equations coming out of exponential
//! utility maximization under closed convex portfolio constraints, and
//! derives from them indifference prices, hedges, convex-dual audits, and
//! risk-aversion asymptotics:
//!
//! - [`geometry`]: constraint sets and cones with projections, distances,
//!   support functions, and their images under the volatility transpose.
//! - [`model`]: market coefficients, risk premium, payoffs, and
//!   integrability diagnostics.
//! - [`paths`]: seeded path simulation, stochastic exponentials, measure
//!   changes, relative entropy.
//! - [`drivers`]: the quadratic generator family, its convex dual, and
//!   the optimal dual density.
//! - [`solver`]: least-squares Monte Carlo and a 1-D PDE solver for the
//!   backward equations, plus explicit value bounds.
//! - [`pricing`]: indifference prices, optimal strategies, and hedges.
//! - [`duality`]: dual values, duality gaps, and the minimal-entropy
//!   specialization.
//! - [`asymptotics`]: small/large risk-aversion limits and alpha sweeps.
//! - [`cli`]: the config-driven command line entry point.
//!
//! Start with the runnable programs under `examples/` for one walkthrough
//! per capability.

pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod drivers;
pub mod duality;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod model;
pub mod oracle;
pub mod paths;
pub mod pricing;
pub mod report;
pub mod solver;
pub mod util;

pub use error::{QbsdeError, Result};
