//! Streaming test-time adaptation on a small 1D-convolutional backbone.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – tensors, dense/conv layers, losses, reverse-mode tape, Adam.
//! * [`normalization`] – batch statistics, instance statistics, soft-shrinkage and
//!   the instance-aware batch normalization (IABN) layer.
//! * [`sampler`] – prediction-balanced reservoir sampling (PBRS) and plain
//!   reservoir sampling memories.
//! * [`streams`] – Dirichlet, i.i.d. and class-sorted stream orderings.
//! * [`model`] – backbone construction, source training and checkpoints.
//! * [`adapt`] – NOTE and the baseline online adapters.
//! * [`harness`] – synthetic data, experiment grid, CSV reports and the CLI.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod error;
pub mod harness;
pub mod model;
pub mod normalization;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod streams;

pub use error::{Result, TtaError};
