// Numeric kernels index several parallel arrays by joint or frame.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod diffcore;
pub mod error;
pub mod ik;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod runtime;

pub use error::{Error, Result};
