//! Recovery of time-varying reward functions from maximum-entropy optimal
//! policies and demonstration data.
//!
//! The library is organized around two structural priors on how the reward
//! changes over time: piecewise-constant rewards with as few switches as
//! possible ([`min_switch`]) and rewards confined to a low-dimensional
//! feature subspace ([`low_rank`]). Both operate on affine feasible sets of
//! (reward, value) pairs ([`sets`]) derived from the soft-optimal policy
//! ([`soft`]), either exactly or through finite-sample confidence intervals
//! ([`estimation`]).

pub mod bench;
pub mod error;
pub mod estimation;
pub mod io;
pub mod low_rank;
pub mod lstsq;
pub mod mdp;
pub mod min_switch;
pub mod sets;
pub mod simplex;
pub mod soft;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
