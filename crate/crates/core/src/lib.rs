//! Gram-preconditioned optimization for low-rank adapters.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: row-major matrices, damped SPD solves, the push-through solve.
//! - [`lora`]: LoRA linear layers and a small MLP with exact backpropagation.
//! - [`fisher`]: left/right Gram curvature, natural directions, and Monte
//!   Carlo / finite-difference checks of the Kronecker and Hessian identities.
//! - [`optim`]: the AdaFish update plus AdamW and momentum SGD baselines.
//! - [`tensor`]: Tucker and CP reparameterizations and the sliced-core cost model.
//! - [`checkpoint`]: binary model and optimizer-state checkpoints.

pub mod checkpoint;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod lora;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
