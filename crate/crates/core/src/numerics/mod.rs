//! Dense tensors, contraction, reverse-mode differentiation and optimization.

pub mod adam;
pub mod contract;
pub mod functional;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod wide;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use contract::{contract, ContractionSpec};
pub use functional::{linear, mlp, mlp_forward, softmax, softmax_tensor, MlpParams};
pub use gradcheck::{finite_diff_check, finite_diff_check_wide, GradcheckConfig, GradcheckReport, WIDE_REFINE_ABOVE};
pub use norm::{normalize, NormKind, NormMode, NormParams, NormState};
pub use ops::{Eager, OpKind, Ops, Unary};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub use wide::Wide;
