//! Randomized inertial block-coordinate fixed-point and primal-dual splitting.
//!
//! The crate is organised bottom-up:
//!
//! * [`hilbert`]: block vectors over a direct sum of Euclidean spaces, linear block
//!   operators with adjoints, diagonal preconditioners and the activation-weighted norm.
//! * [`operators`]: proximity operators, resolvents, cocoercive gradients and the
//!   algebra of averaged maps.
//! * [`km`]: the inertial Krasnosel'skii–Mann iteration and its parameter validator.
//! * [`block`]: random activation masks and the stochastic block-coordinate iterations.
//! * [`pd`]: preconditioned forward-backward and the three primal-dual algorithms.

pub mod block;
pub mod error;
pub mod hilbert;
pub mod km;
pub mod operators;
pub mod pd;

pub use error::{Error, Result};
pub use hilbert::{BlockLayout, BlockVector, DiagonalPreconditioner, LinearBlockOperator};
