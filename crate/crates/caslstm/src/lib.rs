//! Cell-aware stacked LSTM (CAS-LSTM) sequence modeling.
//!
//! A stacked LSTM normally feeds only hidden states upward; a cell-aware
//! stack also passes the lower layer's cell state through an additional
//! forget gate, so both the left and the lower context are merged by the
//! same soft gating mechanism. This crate implements that cell, the plain
//! stacked baseline, and a peephole-integration variant, together with the
//! surrounding machinery needed to use and inspect them:
//!
//! - [`tensor`]: dense rank-1/2 arrays, activations, seeded initialization
//! - [`cell`]: per-timestep forward and hand-derived backward passes
//! - [`encoder`]: recurrence over time and layers, pooling, bidirection
//! - [`classifier`]: sentence-pair feature functions and an MLP head
//! - [`model`]: a full classification model with named parameters
//! - [`data`]: vocabulary, batching, and toy task generators
//! - [`train`]: SGD/Adam, dropout, clipping, and finite-difference checks
//! - [`analysis`]: vertical forget gate statistics and parameter counting
//!
//! Everything is `no_std`-compatible (with `alloc`); file formats and the
//! command-line interface live in the companion `caslstm-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod cell;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
