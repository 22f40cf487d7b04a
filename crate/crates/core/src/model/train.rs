//! Training loop for the network.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MemMlp, MemMlpConfig, MemoryInputs};
use crate::data::Dataset;
use crate::diffcore::{AdamW, AdamWConfig, LrSchedule, Real, Tape};
use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::prior::VqVae;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub schedule: LrSchedule,
    pub adam: AdamWConfig,
    pub seed: u64,
    /// Log every this many steps; 0 disables progress logging.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 256,
            schedule: LrSchedule::default(),
            adam: AdamWConfig::default(),
            seed: 0,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.schedule.total == 0 {
            return Err(Error::Config(
                "training needs a positive batch size and step count".into(),
            ));
        }
        if !(self.schedule.lr0 > 0.0 && self.schedule.lr1 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one optimiser step. Position terms are zero without the
/// position head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub theta: f64,
    pub rv: f64,
    pub p: f64,
    pub fv: f64,
    pub lr: f64,
}

impl LossRecord {
    /// `L_θ + L_rv + L_p + L_fv`, comparable across weighting modes.
    pub fn unweighted(&self) -> f64 {
        self.theta + self.rv + self.p + self.fv
    }
}

/// Code vector of every dataset window's previous window, `N x latent`.
pub fn code_table<S: Real>(prior: &VqVae<S>, ds: &Dataset) -> Result<Array2<S>> {
    const CHUNK: usize = 256;
    let mut out = Array2::zeros((ds.len(), prior.cfg.latent));
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let b = ds.batch::<S>(chunk);
        let (_, e) = prior.codes(b.x_prev.view(), b.target_prev.view())?;
        out.slice_mut(s![c * CHUNK..c * CHUNK + chunk.len(), ..]).assign(&e);
    }
    Ok(out)
}

/// Step-wise trainer; the caller decides when to stop or checkpoint.
pub struct Trainer<'d> {
    pub model: MemMlp<f32>,
    ds: &'d Dataset,
    codes: Option<Array2<f32>>,
    lower: Vec<usize>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model_cfg: MemMlpConfig,
        cfg: TrainConfig,
        ds: &'d Dataset,
        prior: Option<&VqVae<f32>>,
        skel: &Skeleton,
    ) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
        }
        if model_cfg.window != ds.window {
            return Err(Error::Config(format!(
                "model window {} differs from dataset window {}",
                model_cfg.window, ds.window
            )));
        }
        let codes = match (model_cfg.uses_memory(), prior) {
            (false, _) => None,
            (true, None) => return Err(Error::Contract("memory blocks need a trained prior".into())),
            (true, Some(p)) => {
                if p.cfg.latent != model_cfg.code_dim || p.cfg.window != model_cfg.window {
                    return Err(Error::Config(format!(
                        "prior (window {}, latent {}) does not match model (window {}, code_dim {})",
                        p.cfg.window, p.cfg.latent, model_cfg.window, model_cfg.code_dim
                    )));
                }
                if !p.is_frozen() {
                    return Err(Error::Contract(
                        "the prior must be frozen before training the model".into(),
                    ));
                }
                Some(code_table(p, ds)?)
            }
        };
        let model = MemMlp::<f32>::new(model_cfg, cfg.seed)?;
        let opt = AdamW::new(&model.store, cfg.adam);
        Ok(Trainer {
            model,
            ds,
            codes,
            lower: skel.lower().to_vec(),
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.schedule.total
    }

    /// One optimiser step on a batch drawn with replacement.
    pub fn step(&mut self) -> Result<LossRecord> {
        let n = self.ds.len();
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| self.rng.random_range(0..n)).collect();
        let batch = self.ds.batch::<f32>(&idx);
        let blend = self.model.random_blend(idx.len(), &mut self.rng);
        let lr = self.cfg.schedule.at(self.step);
        let model = &self.model;
        let (grads, rec) = {
            let mut tape = Tape::new();
            let x = tape.constant(batch.x);
            let mem = self.codes.as_ref().map(|table| {
                let mut e = Array2::zeros((idx.len(), table.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    e.row_mut(r).assign(&table.row(i));
                }
                MemoryInputs {
                    x_prev: tape.constant(batch.x_prev),
                    theta_prev: tape.constant(batch.target_prev),
                    codes: tape.constant(e),
                }
            });
            let out = model.forward_on(&mut tape, x, mem.as_ref(), &blend)?;
            let (total, losses) = model.losses_with(&mut tape, &model.store, &out, &batch.target, &self.lower)?;
            let get = |i: usize, tape: &Tape<'_, f32>| losses.get(i).map(|&v| tape.scalar(v).as_f64()).unwrap_or(0.0);
            let rec = LossRecord {
                step: self.step,
                total: tape.scalar(total).as_f64(),
                theta: get(0, &tape),
                rv: get(1, &tape),
                p: get(2, &tape),
                fv: get(3, &tape),
                lr,
            };
            if !rec.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
            }
            (tape.backward(total)?, rec)
        };
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads)?;
        self.opt.step(&mut self.model.store, lr)?;
        self.step += 1;
        if self.cfg.log_every > 0 && self.step.is_multiple_of(self.cfg.log_every) {
            log::info!(
                "step {} loss {:.5} (θ {:.5} rv {:.5} p {:.5} fv {:.5}) lr {lr:.2e}",
                self.step,
                rec.total,
                rec.theta,
                rec.rv,
                rec.p,
                rec.fv
            );
        }
        Ok(rec)
    }

    pub fn into_model(self) -> MemMlp<f32> {
        self.model
    }
}

/// Runs the full schedule and returns the model with one record per step.
pub fn train(
    model_cfg: MemMlpConfig,
    cfg: TrainConfig,
    ds: &Dataset,
    prior: Option<&VqVae<f32>>,
    skel: &Skeleton,
) -> Result<(MemMlp<f32>, Vec<LossRecord>)> {
    let mut t = Trainer::new(model_cfg, cfg, ds, prior, skel)?;
    let mut log = Vec::new();
    while !t.finished() {
        log.push(t.step()?);
    }
    Ok((t.into_model(), log))
}
