use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// AdamW: `value *= 1 - lr * wd` before the moment step.
    Decoupled,
    /// Classic Adam with L2: `grad += wd * value`.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay: WeightDecay::Decoupled,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
    step: u64,
}

impl<S: Real> AdamW<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter from its `grad`.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Frozen("optimizer step on frozen parameters".into()));
        }
        if store.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let lr_s = S::of(lr);
        let eps = S::of(c.eps);
        let wd = S::of(c.weight_decay);
        let shrink = S::of(1.0 - lr * c.weight_decay);
        let inv_bc1 = S::of(1.0 / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let decay = c.decay;

        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if decay == WeightDecay::Decoupled && c.weight_decay != 0.0 {
                p.value.mapv_inplace(|x| x * shrink);
            }
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    let g = match decay {
                        WeightDecay::Coupled => g + wd * *x,
                        WeightDecay::Decoupled => g,
                    };
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m * inv_bc1;
                    let v_hat = *v * inv_bc2;
                    *x -= lr_s * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `lr0` before `drop_at`, `lr1` after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub total: u64,
    pub drop_at: u64,
    pub lr0: f64,
    pub lr1: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            total: 300_000,
            drop_at: 225_000,
            lr0: 3e-4,
            lr1: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        lr_schedule(step, self.drop_at, self.lr0, self.lr1)
    }
}

pub fn lr_schedule(step: u64, drop_at: u64, lr0: f64, lr1: f64) -> f64 {
    if step < drop_at {
        lr0
    } else {
        lr1
    }
}
