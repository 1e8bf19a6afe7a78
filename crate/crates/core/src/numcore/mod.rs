//! Dense numeric primitives, seeded randomness, probability utilities and
//! the reverse-mode tape used by every gradient-based method.

pub mod loss;
pub mod matrix;
pub mod prob;
pub mod rng;
pub mod tape;

pub use loss::LossGrad;
pub use matrix::Matrix;
pub use prob::{cosine, entropy, softmax};
pub use rng::Rng;
pub use tape::{grad, GradTape, Gradients, ParamId};
