//! Arrays, reverse-mode differentiation, null-space extraction and the
//! momentum-SGD optimizer.

mod array;
pub mod linalg;
pub mod loss;
pub mod optim;
mod params;
mod tape;

pub use array::{dot, norm, sq_dist, RealArray};
pub use linalg::null_space;
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use optim::{sgd_step, OptimizerState};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
