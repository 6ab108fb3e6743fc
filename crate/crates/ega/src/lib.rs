// Guards written as `!(x > 0.0)` are deliberate: they reject NaN along
// with out-of-range values. Test code builds configs by mutating defaults.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::field_reassign_with_default)]

//! Multi-task gradient balancing built around eccentric gradient alignment:
//! per-task gradients are projected into a mutually orthogonal frame,
//! rescaled to the smallest retained singular value, and recombined with
//! difficulty weights derived from each task's learning progress.
//!
//! The crate also carries the desk-scale apparatus used to exercise the
//! strategies end to end: a three-head feed-forward model with analytic
//! backprop, a synthetic paired vibration/ECG benchmark with configurable
//! noise protocols, evaluation metrics, and a reproducible experiment
//! harness behind a CLI.

pub mod balance;
pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod netcore;
pub mod synth;

pub use error::{Error, Result};
