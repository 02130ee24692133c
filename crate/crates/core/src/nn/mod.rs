//! Reverse-mode automatic differentiation and the small op library the
//! models are built from.
//!
//! Design: a [`Tape`] records one forward pass per minibatch; [`Var`] is a
//! copyable handle into it. Parameters live in a [`ParamStore`] outside any
//! tape and are leased in as leaf nodes each step. Everything is generic
//! over [`Scalar`] so training runs in `f32` while gradient checks run the
//! same code in `f64` against central finite differences.
//!
//! All compute is sequential and allocation order is deterministic, so a
//! fixed seed reproduces training bit for bit.

mod conv;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod rnn;
mod tape;

pub use conv::{
    conv1d, conv2d, depthwise_conv1d, global_avg_pool2d, maxpool2d, Conv1dSpec, Conv2dSpec,
};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use ops::{concat, linear};
pub use optim::{global_grad_norm, Adam, AdamConfig};
pub use params::{
    kaiming_uniform, ones, recurrent_uniform, xavier_uniform, zeros, ParamId, ParamStore,
};
pub use rnn::gru;
pub use tape::{Gradients, Lease, Tape, Var};

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Element type for all tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
