//! Concrete dropout: dense layers whose per-layer drop probability is a
//! trained variational parameter, optimised through a continuous sigmoid
//! relaxation of the Bernoulli mask.
//!
//! The crate also provides Monte-Carlo predictive sampling with the
//! epistemic / aleatoric decomposition, calibration curves, data loaders
//! and the experiment harnesses driven by the `cdrop` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod ndcore;
pub mod objective;
pub mod train;
pub mod uncertainty;

pub use error::{Error, ErrorClass, Result};
pub use ndcore::{RngStream, Tensor};
