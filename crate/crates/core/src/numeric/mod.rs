//! Dense tensors, reverse-mode differentiation and first-order optimizers.

pub mod gradcheck;
mod optim;
mod sparse;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{check_analytic, check_gradients, GradCheckConfig, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig};
pub use sparse::CsrMatrix;
pub use store::{read_tensors, write_tensors};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
