//! Small reverse-mode differentiable compute core.
//!
//! Every tensor is a row-major matrix. Sequence batches are stacked along
//! rows: a batch of `B` windows of length `T` with `d` channels is a
//! `(B*T) x d` matrix, and the ops that mix time steps (temporal convolution,
//! frame differences, pooling) take the window length so they never cross a
//! window boundary.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{lr_schedule, AdamW, AdamWConfig, LrSchedule, WeightDecay};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, LAYERNORM_EPS};

use ndarray::{Array2, NdFloat};

/// Scalar type the core computes in: `f32` for training and inference,
/// `f64` for gradient verification.
pub trait Real: NdFloat + Default + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix value.
pub type Tensor<S> = Array2<S>;

pub(crate) fn cast<A: Real, B: Real>(t: &Array2<A>) -> Array2<B> {
    t.mapv(|v| B::of(v.as_f64()))
}
