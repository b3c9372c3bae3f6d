//! Backward stochastic differential equations driven by finite-state jump
//! Markov processes.
//!
//! The crate builds finite-state models ([`markov`]), represents BSDE data and
//! solutions as value fields ([`bsde`]), solves globally Lipschitz problems by
//! Picard iteration with a direct nonlinear integration as a cross-check
//! ([`solver::lipschitz`]), handles locally Lipschitz drivers through a
//! truncation cascade on short subintervals ([`solver::local`]), evaluates the
//! a-priori and difference estimates ([`estimates`]), verifies solutions along
//! simulated paths ([`montecarlo`]) and prices claims from a jump-driven wealth
//! equation ([`finance`]). [`cli`] ties everything to configuration files.

pub mod bsde;
pub mod cli;
pub mod drivers;
pub mod error;
pub mod estimates;
pub mod finance;
pub mod grid;
pub mod markov;
pub mod montecarlo;
mod ode;
pub mod solver;

pub use bsde::{b_distance, z_field_from_value, z_norm, Driver, DriverPoint, TerminalCondition, ValueField};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use markov::{compensated_integral, MarginalLaw, MarkovModel, Modulation, PathSeed, Trajectory};
