//! Minimal tensor engine for the hybrid CNN: layer kernels with hand-written
//! backward passes, weighted cross-entropy, Adam, finite-difference checks
//! and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::Activation;
pub use loss::{sample_cce, weighted_cce};
pub use model::{
    argmax_rows, build_model, build_model_with, ForwardTrace, Gradients, LayerSummary, Mode,
    ModelConfig, ModelInput, ModelState, Variant, SEGMENT_INPUT_LEN,
};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected shape {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
