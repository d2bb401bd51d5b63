//! Dense reverse-mode differentiation, the ELU perceptron used by every
//! learnable component, and the adaptive-moment optimizer.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{Dense, MlpParams};
pub use optim::{adam_step, AdamConfig, GradMap, OptimState};
pub use tape::{elu, elu_grad, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("gradient for parameter {0} missing or mis-shaped")]
    MissingGradient(usize),
    #[error("gradient for parameter {0} is not finite")]
    NonFiniteGradient(usize),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(&'static str),
}
