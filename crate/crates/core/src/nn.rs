//! Parameterised layers shared by the prior and the main network.
//!
//! A layer only holds [`ParamId`]s; values live in the owning
//! [`ParamStore`], so the same layer description works at any precision.

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::Result;

/// Affine map `x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    /// Weights drawn from `uniform(±1/sqrt(d_in))`; zero bias.
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), (d_in, d_out), d_in, rng);
        let b = store.add_zeros(format!("{name}.b"), (1, d_out));
        Dense { w, b, d_in, d_out }
    }

    pub fn forward<'a, S: Real>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Layer normalisation over the feature axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add_ones(format!("{name}.gamma"), (1, d)),
            beta: store.add_zeros(format!("{name}.beta"), (1, d)),
        }
    }

    pub fn forward<'a, S: Real>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b)
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}

/// Length-preserving temporal convolution over stacked windows.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv {
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * d_in;
        let w = store.add_uniform(format!("{name}.w"), (fan_in, d_out), fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), (1, d_out));
        Conv { w, b, kernel }
    }

    pub fn forward<'a, S: Real>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b, seq_len)
    }

    pub fn param_count(d_in: usize, d_out: usize, kernel: usize) -> usize {
        kernel * d_in * d_out + d_out
    }
}
