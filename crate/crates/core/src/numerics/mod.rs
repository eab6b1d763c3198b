//! Tensor primitives, a reverse-mode gradient tape, finite-difference
//! verification and the AdamW optimiser.

pub mod flops;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, grad_check_filtered, numeric_gradients, relative_error, GradCheckFailure, GradCheckReport, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bindings, Parameter, ParamStore};
pub use tensor::{
    layernorm, matmul, matmul_nt, matmul_tn, rmsnorm, rope_columns, sigmoid, sigmoid_deriv, softmax, Scalar,
    Tensor,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
