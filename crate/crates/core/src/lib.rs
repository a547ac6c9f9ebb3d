//! Semantics-assisted video captioning.
//!
//! A semantic detection network ([`sdn`]) turns concatenated video features
//! into tag probabilities; a semantic compositional LSTM ([`scn_decoder`])
//! consumes features and tags to generate captions. [`trainer`] holds the
//! scheduled-sampling training loop with the sentence-length-modulated loss,
//! [`metrics`] the caption and multi-label evaluation suite.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod numkit;
pub mod scn_decoder;
pub mod sdn;
pub mod trainer;

pub use error::{Error, Result};
