//! Solver and certificate toolkit for continuous-time finite-state mean
//! field games.
//!
//! The library is organized around the coupled forward-backward system of a
//! finite-state mean field game: a Kolmogorov equation for the population
//! distribution `m`, a Bellman equation for the value vector `phi`, a second
//! Kolmogorov equation for the law `mu` of a tagged representative player,
//! and a scalar bookkeeping variable `z` whose monotonicity encodes
//! optimality. On top of the integrators sit three layers:
//!
//! - [`reformulation`] computes the exploitability functional `J` and turns
//!   a candidate trajectory bundle into a pass/fail equilibrium certificate.
//! - [`solver`] produces equilibrium candidates by fictitious play or Picard
//!   iteration on the best-response map; candidates are never trusted, only
//!   certified.
//! - [`attainability`] and [`master`] approximate the set of equilibrium
//!   values reachable from an initial condition, via backward sampling of
//!   the attainability set and via residuals of the value field on a
//!   simplex grid.
//!
//! The [`cli`] module exposes these as the `mfg-fsolve` command-line tool.

pub mod attainability;
pub mod cli;
pub mod dynamics;
mod error;
pub mod master;
pub mod model;
pub mod reformulation;
pub mod relaxed;
pub mod report;
pub mod solver;

pub use error::{Error, Result};
