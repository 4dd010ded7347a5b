//! Slotted-time simulator for timely edge learning: federated and
//! centralized training under a total delay budget, and deadline-constrained
//! inference offloading with dynamic compression.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod event;
pub mod fl;
pub mod infer;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
