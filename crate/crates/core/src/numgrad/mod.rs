//! Differentiable numerics: dense arrays, MLPs, reverse-mode gradients,
//! Adam and Gaussian likelihoods.

mod adam;
mod array;
mod gaussian;
mod graph;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use array::{matmul, Array};
pub use gaussian::{
    gaussian_nll, gaussian_nll_graph, gaussian_nll_rows, soft_clamp, soft_clamp_graph,
    GaussianHead, LOG_2PI, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use graph::{eval_loss, finite_diff_grad, grad, sigmoid, softplus, Gradients, Graph, Var};
pub use mlp::{mlp_forward, mlp_graph, MlpParams};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}
