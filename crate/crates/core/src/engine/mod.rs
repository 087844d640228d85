//! Reverse-mode autodiff engine with the layer primitives the models use.

pub mod batchnorm;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use batchnorm::{BatchNormState, RunningStats};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamCheck, Probe};
pub use optim::{AdamConfig, AdamState};
pub use params::ParamSet;
pub use tape::{Activation, BatchStats, Gradients, Mode, PoolPolicy, Tape, Var};
pub use tensor::Tensor;
