//! Minimal reverse-mode automatic differentiation over 3-D tensors.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{batch_jacobians, gradient_check, relative_error, Objective, GradCheckError, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Bound, FormatError, ParamSet, FORMAT_VERSION};
pub use tensor::{Real, ShapeError, Tensor};
