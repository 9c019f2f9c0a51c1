//! Small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! It covers exactly what the generator needs: training the denoiser
//! (gradients w.r.t. weights) and differentiating the full sampling chain
//! w.r.t. the policy condition (one long tape, one reverse sweep per output).

mod mlp;
mod tape;
mod tensor;

pub use mlp::{mlp_apply, mlp_on_tape, MlpNodes, MlpParams};
pub use tape::{forward, Activation, Gradients, Leaf, NodeId, Recording, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} needs {} values, found {found}", shape.iter().product::<usize>())]
    ValueCount { shape: Vec<usize>, found: usize },
    #[error("shape mismatch in `{op}`: operand shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("slice {start}..{end} out of range for shape {shape:?}")]
    Slice {
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("seed shape {found:?} does not match output shape {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite adjoint at node {node} (`{op}`)")]
    NonFiniteAdjoint { node: usize, op: &'static str },
    #[error("non-finite value at node {node}")]
    NonFiniteValue { node: usize },
    #[error("parameter block `{name}` has {found} values, expected {expected}")]
    Parameter {
        name: &'static str,
        expected: usize,
        found: usize,
    },
}
