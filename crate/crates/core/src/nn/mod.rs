//! Deterministic tensor autodiff, the transformer CTC recognizer and Adam.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod model;

pub use adam::{adam_step, adam_step_map, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use model::{init_model, EncoderConfig, Model, ALPHABET_SIZE, MAX_FRAMES};
