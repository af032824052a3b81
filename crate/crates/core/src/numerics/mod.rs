//! Dense tensors, seeded random streams and reverse-mode differentiation.

mod gradcheck;
mod param;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, GradCheckOptions, GradientReport};
pub use param::{Param, ParamKey};
pub use real::{Precision, Real};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
