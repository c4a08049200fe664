//! Dense matrices, activations with their reverse-mode rules, seeded
//! initialization, parameter storage and the finite-difference checker.

mod gradcheck;
mod matrix;
pub mod ops;
mod params;
mod rng;

pub use gradcheck::{check_gradients, check_gradients_by, relative_error, GradCheckReport, TensorCheck};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use rng::{dropout_mask, glorot_init, Rng};
