//! Dense numeric kernel: row-major matrices, stable elementwise math,
//! a reverse-mode gradient tape and a central-difference gradient checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{central_difference, grad_check};
pub use matrix::{log_sigmoid, log_softmax, logsumexp, sigmoid, softmax_log, Matrix};
pub use tape::{Gradients, Tape, Var};

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
