//! Simulation of a driven spin qubit under hybrid classical/quantum 1/f
//! charge noise.
//!
//! The quantum part of the bath enters through a time-local master equation
//! whose memory is carried by auxiliary kernel operators; the classical part
//! is a sum of Ornstein-Uhlenbeck detuning processes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dynamics;
pub mod error;
pub mod filter;
pub mod grid;
pub mod krotov;
pub mod liouville;
pub mod lsq;
pub mod noise;
pub mod protocols;
pub mod tomography;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
