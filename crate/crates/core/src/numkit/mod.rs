//! Dense matrices, a reverse-mode tape over the handful of primitives the
//! generator needs, Adam, and the diagonal Gaussian KL.

mod adam;
mod kl;
mod matrix;
mod mlp;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use kl::gaussian_kl;
pub use matrix::Matrix;
pub use mlp::{mlp_forward, Activation, Dense, Mlp};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
