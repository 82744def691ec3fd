//! Lottery-ticket subnetwork laboratory.
//!
//! A small transformer CTC recognizer is pretrained on an imbalanced mix of
//! synthetic languages, fine-tuned per language, pruned by global magnitude,
//! and the resulting masks are exchanged, merged and compared by overlap.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod prune;
pub mod report;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParameterTree, Region, Tensor};
