//! Explicit-duration Markov switching models.
//!
//! Exact and approximate inference, decoding and learning for switching models
//! whose segment durations follow an explicit distribution, in the decreasing-count,
//! increasing-count and count-duration encodings, plus the switching linear
//! Gaussian state-space extension.

pub mod approx;
pub mod bn;
pub mod chains;
pub mod cli;
pub mod config;
pub mod edmsm;
pub mod edslgssm;
pub mod error;
pub mod hmm;
pub mod lgssm;
pub mod numeric;
pub mod oracle;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
