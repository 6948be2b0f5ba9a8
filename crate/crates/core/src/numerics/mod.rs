//! Dense tensors, a gradient tape, and a finite-difference oracle.
//!
//! All reductions accumulate sequentially in index order, so results never
//! depend on scheduling.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_where, relative_error, GradCheckReport};
pub use ops::{gelu, layer_norm, matmul, softmax, standardize, LAYER_NORM_EPS};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
