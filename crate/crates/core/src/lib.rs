//! Deterministic simulator of hybrid split/federated training with a
//! two-exit model, entropy-routed inference and an analytic latency model
//! for choosing the client/server cut.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod inference;
pub mod latency;
pub mod nn;
pub mod partition;
pub mod seed;

pub use error::{Error, Result};
