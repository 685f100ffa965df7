//! Minimal dense autodiff used by the viewport predictor, the bitrate agent
//! and the preference identifier.

mod graph;
mod layers;
mod matrix;
mod optim;
mod params;

pub mod gradcheck;

pub use graph::{sigmoid, softmax_rows, wrap_signed, Gradients, Graph, Var};
pub use layers::{LayerNorm, Linear};
pub use matrix::Matrix;
pub use optim::{clip_grad_norm, Adam, Sgd};
pub use params::{glorot_uniform, he_uniform, uniform, ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}
