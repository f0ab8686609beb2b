//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same generic
//! ops in `f64` where central finite differences are meaningful.

mod checkpoint;
mod conv;
mod data;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, load_checkpoint_raw, save_checkpoint, CheckpointError};
pub use data::{Scalar, TensorData};
pub use optim::{adam_step, clip_grad_norm, sgd_step, AdamState};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, TensorError, Var};
