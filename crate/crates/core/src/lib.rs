//! Distributed model predictive control of a vehicle platoon over a delayed
//! V2V network, with a terminal safe set that keeps every follower able to
//! stop behind its predecessor.

// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod dynamics;
pub mod mpc;
pub mod qp;
pub mod cli;
pub mod config;
pub mod sim;
pub mod safeset;
pub mod v2v;

pub use error::{Error, Result};
