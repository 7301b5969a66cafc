//! Visual-engagement pretraining: engagement features, k-means pseudo-labels,
//! a small multi-task encoder, and downstream transfer evaluation.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod error;
pub mod features;
pub mod io;
pub mod labeling;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
