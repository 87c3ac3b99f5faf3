//! Dense linear algebra, randomness, losses, optimizer, and spectral tools.

pub mod fd;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod spectral;

pub use fd::finite_difference_gradient;
pub use loss::{grouped_cross_entropy, softmax, softmax_cross_entropy, squared_loss};
pub use matrix::{argmax, matmul, Matrix};
pub use optim::{adamw_step, clip_global_norm, AdamW, AdamWConfig, AdamWState};
pub use rng::Rng;
pub use spectral::{top_singular_values, SingularValues};
