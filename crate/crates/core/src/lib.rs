//! Differentially private synthetic text generation by private evolution.
//!
//! A population of model-generated texts is repeatedly scored against a
//! private corpus through a noisy nearest-neighbour histogram, pruned, and
//! refilled with model variations of the survivors. Only the noisy histogram
//! ever depends on private data, so the whole run inherits the Gaussian
//! mechanism's guarantee.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod embed;
pub mod engine;
pub mod error;
pub mod genapi;
pub mod metrics;
pub mod mockworld;
pub mod privacy;
pub mod retry;
pub mod rng;
pub mod select;
pub mod types;
pub mod vote;

pub use error::{Error, Result};
