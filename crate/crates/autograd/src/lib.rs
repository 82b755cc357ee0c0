//! Dense CPU tensors with a reverse-mode autodiff tape.
//!
//! Values are generic over [`Float`] so the same model code runs in `f32`
//! for training and `f64` for finite-difference gradient checks.

pub mod float;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use float::{gemm, Float, MatRef};
pub use optim::AdamW;
pub use params::{accumulate_grads, clip_grad_norm, global_norm, Bound, GradMap, ParamStore};
pub use tape::{AttnSpec, Grads, Tape, Var};
pub use tensor::Tensor;
