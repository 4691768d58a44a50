//! Dense f32 tensors with a reverse-mode tape, the layer operations used by the
//! diffusion and segmentation models, AdamW, and the `PGT1`/`PGCK` file formats.

mod error;
pub mod format;
mod gemm;
pub mod gradcheck;
pub mod gradsuite;
pub mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use format::{load_tensor, save_tensor, Archive};
pub use gradcheck::{
    grad_check, grad_check_projected, grad_check_weighted, Coverage, GradCheckReport,
};
pub use optim::{adamw_step, AdamW, AdamWConfig, LrSchedule, Moments, OptimizerState};
pub use params::{init_uniform, Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
