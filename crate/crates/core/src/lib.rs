//! Killed and concatenated Markov processes on finite state spaces and the
//! real line.
//!
//! The library builds the two constructions end to end and verifies their
//! defining identities numerically:
//!
//! - **Cemetery extension** ([`extended_state`]): sub-Markov kernels, their
//!   one-point extensions by a dead state, and the exact function-extension
//!   algebra.
//! - **Process models** ([`process_models`]): exact jump paths of finite-state
//!   chains, Euler-discretized 1-D diffusions, and the uniformization oracle
//!   for `e^{t(L - diag c)}`.
//! - **Functionals** ([`functionals`]): accumulated kill rates, the weight
//!   processes `e^{-A}` and `1_{[0, tau)}`, hitting times and path lifetimes.
//! - **Killing** ([`killing`]): lifetimes from the unit-exponential clock,
//!   killed paths, weighted vs. hard Monte Carlo for the killed operator, the
//!   joint lifetime/exit-point law, and the killed generator check.
//! - **Concatenation** ([`concatenation`]): splicing killed blocks through
//!   revival kernels, restore chains, the restart formula, the revival-law
//!   test, and the invariant law of restore chains.
//! - **Verification** ([`verification`]): mergeable estimator reports,
//!   goodness-of-fit tests, slope fits, quadrature.
//! - **CLI** ([`cli`]): JSON-configured experiment runner with bundled demos.
//!
//! Every Monte Carlo routine consumes explicit [`process_models::RngStream`]
//! values, so all outputs are reproducible bit for bit given a master seed.

pub mod cli;
pub mod concatenation;
pub mod error;
pub mod extended_state;
pub mod functionals;
pub mod killing;
mod mat;
mod parallel;
pub mod process_models;
pub mod verification;

pub use error::{Error, Result};
