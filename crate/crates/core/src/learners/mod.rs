//! Differentiable building blocks shared by every learned module.
//!
//! Forward passes are recorded on a [`Graph`] tape over dense 2-D arrays and
//! differentiated in reverse. The same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradProbe};
pub use layers::{mlp_forward, recurrent_step, BoundLinear, BoundLstm, BoundMlp, LinearSpec, LstmSpec, LstmState, MlpSpec};
pub use optim::{clip_global_norm, Adam, OptimizerSpec};
pub use params::{Gradients, ParamSet};
pub use tape::{Graph, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point element type usable on the tape.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
