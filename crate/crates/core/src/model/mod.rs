//! The sparse-to-full-body network.
//!
//! A residual stack of temporal MLP blocks lifts the `T x 54` sparse input
//! to `T x d`. After selected blocks a memory block injects what is known
//! about the previous window: its sparse input, its full-body motion and
//! the prior's code vector for it. Two heads decode the final hidden state
//! into 6D joint rotations and global joint positions.

mod loss;
mod train;

pub use loss::{
    join_targets, loss_pos_velocity, loss_position, loss_rot_velocity, loss_theta, split_targets, total_loss,
    LossWeighting, MANUAL_WEIGHTS,
};
pub use train::{code_table, train, LossRecord, TrainConfig, Trainer};

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SPARSE_DIM, TARGET_DIM};
use crate::diffcore::{read_checkpoint, write_checkpoint, Checkpoint, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::kinematics::{positions_from_global, sixd_to_matrix, Rot6D, Skeleton, Vec3, JOINTS};
use crate::nn::{Conv, Dense, Norm};
use crate::prior::VqVae;

pub const CHECKPOINT_KIND: &str = "memmlp";
pub const ROT_DIM: usize = JOINTS * 6;
pub const POS_DIM: usize = JOINTS * 3;

/// Blend coefficient `m` used by the memory blocks at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Blend {
    /// `m ≡ value`.
    Fixed { value: f64 },
    /// `m ~ U[0, 1]` elementwise, seeded per frame.
    Sampled { seed: u64 },
}

impl Default for Blend {
    fn default() -> Self {
        Blend::Fixed { value: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemMlpConfig {
    pub window: usize,
    /// Hidden width `d`.
    pub width: usize,
    /// Number of backbone MLP blocks `L`.
    pub depth: usize,
    pub conv_kernel: usize,
    /// 1-based backbone blocks followed by a memory block.
    pub memory_layers: Vec<usize>,
    /// MLP blocks per prediction head.
    pub predictor_depth: usize,
    /// Separate position head; without it positions come from forward
    /// kinematics of the predicted rotations.
    pub multi_head: bool,
    /// Width of the prior's code vectors.
    pub code_dim: usize,
    pub weighting: LossWeighting,
    pub blend: Blend,
}

impl Default for MemMlpConfig {
    fn default() -> Self {
        MemMlpConfig {
            window: 41,
            width: 256,
            depth: 8,
            conv_kernel: 3,
            memory_layers: vec![2, 4, 6, 8],
            predictor_depth: 2,
            multi_head: true,
            code_dim: 256,
            weighting: LossWeighting::Homoscedastic,
            blend: Blend::default(),
        }
    }
}

impl MemMlpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if self.width == 0 || self.depth == 0 || self.code_dim == 0 {
            return bad("width, depth and code_dim must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        let mut sorted = self.memory_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.memory_layers {
            return bad("memory_layers must be strictly increasing".into());
        }
        if let Some(&l) = self.memory_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return bad(format!("memory layer {l} outside 1..={}", self.depth));
        }
        if let Blend::Fixed { value } = self.blend {
            if !(0.0..=1.0).contains(&value) {
                return bad(format!("fixed blend {value} outside [0, 1]"));
            }
        }
        if let LossWeighting::Manual { weights } = self.weighting {
            if weights.iter().any(|w| !w.is_finite()) {
                return bad("manual loss weights must be finite".into());
            }
        }
        Ok(())
    }

    pub fn uses_memory(&self) -> bool {
        !self.memory_layers.is_empty()
    }

    /// Losses trained: `(θ, rv)` plus `(p, fv)` with the position head.
    pub fn loss_count(&self) -> usize {
        if self.multi_head {
            4
        } else {
            2
        }
    }

    fn block_params(&self) -> usize {
        let d = self.width;
        Conv::param_count(d, d, self.conv_kernel) + Norm::param_count(d) + Dense::param_count(d, d)
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let proj = |d_in: usize| Dense::param_count(d_in, d) + Norm::param_count(d);
        let memory = proj(SPARSE_DIM) + proj(TARGET_DIM) + proj(self.code_dim) + Dense::param_count(2 * d, d);
        let head = |out: usize| self.predictor_depth * self.block_params() + Dense::param_count(d, out);
        let log_vars = match self.weighting {
            LossWeighting::Homoscedastic => self.loss_count(),
            LossWeighting::Manual { .. } => 0,
        };
        Dense::param_count(SPARSE_DIM, d)
            + self.depth * self.block_params()
            + self.memory_layers.len() * memory
            + head(ROT_DIM)
            + if self.multi_head { head(POS_DIM) } else { 0 }
            + log_vars
    }

    /// Multiply-accumulates of the network (prior excluded) for one window.
    pub fn macs(&self) -> u64 {
        let t = self.window as u64;
        let d = self.width as u64;
        let k = self.conv_kernel as u64;
        let block = t * k * d * d + t * d * d;
        let memory = t * SPARSE_DIM as u64 * d + t * TARGET_DIM as u64 * d + self.code_dim as u64 * d + t * 2 * d * d;
        let head = |out: u64| self.predictor_depth as u64 * block + t * d * out;
        t * SPARSE_DIM as u64 * d
            + self.depth as u64 * block
            + self.memory_layers.len() as u64 * memory
            + head(ROT_DIM as u64)
            + if self.multi_head { head(POS_DIM as u64) } else { 0 }
    }
}

/// conv → layernorm → SiLU → linear, added to the block input.
#[derive(Debug, Clone)]
struct MlpBlock {
    conv: Conv,
    norm: Norm,
    lin: Dense,
}

impl MlpBlock {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpBlock {
            conv: Conv::new(store, &format!("{name}.conv"), d, d, k, rng),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            lin: Dense::new(store, &format!("{name}.lin"), d, d, rng),
        }
    }

    fn forward<'a, S: Real>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        h: Var,
        seq: usize,
    ) -> Result<Var> {
        let c = self.conv.forward(tape, store, h, seq)?;
        let n = self.norm.forward(tape, store, c)?;
        let a = tape.silu(n);
        let o = self.lin.forward(tape, store, a)?;
        tape.add(h, o)
    }
}

/// linear → layernorm → SiLU.
#[derive(Debug, Clone)]
struct Proj {
    lin: Dense,
    norm: Norm,
}

impl Proj {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Proj {
            lin: Dense::new(store, &format!("{name}.lin"), d_in, d, rng),
            norm: Norm::new(store, &format!("{name}.norm"), d),
        }
    }

    fn forward<'a, S: Real>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var> {
        let l = self.lin.forward(tape, store, x)?;
        let n = self.norm.forward(tape, store, l)?;
        Ok(tape.silu(n))
    }
}

#[derive(Debug, Clone)]
struct MemoryBlock {
    x: Proj,
    theta: Proj,
    code: Proj,
    fuse: Dense,
}

#[derive(Debug, Clone)]
struct Head {
    blocks: Vec<MlpBlock>,
    out: Dense,
}

impl Head {
    fn forward<'a, S: Real>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        h: Var,
        seq: usize,
    ) -> Result<Var> {
        let mut h = h;
        for b in &self.blocks {
            h = b.forward(tape, store, h, seq)?;
        }
        self.out.forward(tape, store, h)
    }
}

/// Previous-window information consumed by the memory blocks, stacked like
/// the current input: `(B*T) x 54`, `(B*T) x 198` and `B x code_dim`.
#[derive(Debug, Clone, Copy)]
pub struct MemoryInputs {
    pub x_prev: Var,
    pub theta_prev: Var,
    pub codes: Var,
}

/// Head outputs: `(B*T) x 132` rotations and, with the position head,
/// `(B*T) x 66` positions.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub rot: Var,
    pub pos: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MemMlp<S: Real> {
    pub cfg: MemMlpConfig,
    pub store: ParamStore<S>,
    input: Dense,
    blocks: Vec<MlpBlock>,
    memory: Vec<MemoryBlock>,
    rot_head: Head,
    pos_head: Option<Head>,
    log_vars: Vec<ParamId>,
}

impl<S: Real> MemMlp<S> {
    pub fn new(cfg: MemMlpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, k) = (cfg.width, cfg.conv_kernel);
        let input = Dense::new(&mut store, "input", SPARSE_DIM, d, &mut rng);
        let blocks = (1..=cfg.depth)
            .map(|l| MlpBlock::new(&mut store, &format!("block.{l}"), d, k, &mut rng))
            .collect();
        let memory = cfg
            .memory_layers
            .iter()
            .map(|l| MemoryBlock {
                x: Proj::new(&mut store, &format!("memory.{l}.x"), SPARSE_DIM, d, &mut rng),
                theta: Proj::new(&mut store, &format!("memory.{l}.theta"), TARGET_DIM, d, &mut rng),
                code: Proj::new(&mut store, &format!("memory.{l}.code"), cfg.code_dim, d, &mut rng),
                fuse: Dense::new(&mut store, &format!("memory.{l}.fuse"), 2 * d, d, &mut rng),
            })
            .collect();
        let mut head = |name: &str, out: usize, store: &mut ParamStore<S>| Head {
            blocks: (0..cfg.predictor_depth)
                .map(|i| MlpBlock::new(store, &format!("{name}.{i}"), d, k, &mut rng))
                .collect(),
            out: Dense::new(store, &format!("{name}.out"), d, out, &mut rng),
        };
        let rot_head = head("rot_head", ROT_DIM, &mut store);
        let pos_head = cfg.multi_head.then(|| head("pos_head", POS_DIM, &mut store));
        // Start the rotation head at the identity rotation for every joint.
        let identity = Rot6D::identity().0;
        store
            .value_mut(rot_head.out.b)
            .indexed_iter_mut()
            .for_each(|((_, c), v)| *v += S::of(identity[c % 6]));
        let log_vars = match cfg.weighting {
            LossWeighting::Homoscedastic => (0..cfg.loss_count())
                .map(|i| store.add_zeros(format!("log_var.{i}"), (1, 1)))
                .collect(),
            LossWeighting::Manual { .. } => Vec::new(),
        };
        Ok(MemMlp {
            cfg,
            store,
            input,
            blocks,
            memory,
            rot_head,
            pos_head,
            log_vars,
        })
    }

    pub fn log_var_ids(&self) -> &[ParamId] {
        &self.log_vars
    }

    /// Same network at another precision.
    pub fn cast<T: Real>(&self) -> MemMlp<T> {
        MemMlp {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            input: self.input.clone(),
            blocks: self.blocks.clone(),
            memory: self.memory.clone(),
            rot_head: self.rot_head.clone(),
            pos_head: self.pos_head.clone(),
            log_vars: self.log_vars.clone(),
        }
    }

    /// Blend matrices for one forward pass over `windows` windows, one per
    /// memory layer.
    pub fn constant_blend(&self, windows: usize, m: f64) -> Vec<Array2<S>> {
        let shape = (windows * self.cfg.window, self.cfg.width);
        (0..self.memory.len())
            .map(|_| Array2::from_elem(shape, S::of(m)))
            .collect()
    }

    /// Elementwise `U[0, 1]` blend matrices, drawn layer by layer.
    pub fn random_blend<R: Rng>(&self, windows: usize, rng: &mut R) -> Vec<Array2<S>> {
        let shape = (windows * self.cfg.window, self.cfg.width);
        (0..self.memory.len())
            .map(|_| Array2::from_shape_simple_fn(shape, || S::of(rng.random::<f64>())))
            .collect()
    }

    /// Blend for inference of the window ending at stream frame `frame`.
    pub fn inference_blend(&self, frame: u64) -> Vec<Array2<S>> {
        match self.cfg.blend {
            Blend::Fixed { value } => self.constant_blend(1, value),
            Blend::Sampled { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frame.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                self.random_blend(1, &mut rng)
            }
        }
    }

    /// `Z_l = Z_x + m * Z_θ + (1 - m) * Z_E` for the `i`-th memory block.
    pub fn memory_block_on<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        i: usize,
        mem: &MemoryInputs,
        m: &Array2<S>,
    ) -> Result<Var> {
        let blk = self
            .memory
            .get(i)
            .ok_or_else(|| Error::Range(format!("memory block {i} of {}", self.memory.len())))?;
        let rows = tape.shape(mem.x_prev).0;
        let (windows, cw) = tape.shape(mem.codes);
        if cw != self.cfg.code_dim || windows * self.cfg.window != rows {
            return Err(Error::Shape(format!(
                "codes {windows}x{cw} for {rows} memory rows (window {}, code_dim {})",
                self.cfg.window, self.cfg.code_dim
            )));
        }
        if m.dim() != (rows, self.cfg.width) {
            return Err(Error::Shape(format!(
                "blend {:?}, expected ({rows}, {})",
                m.dim(),
                self.cfg.width
            )));
        }
        let zx = blk.x.forward(tape, store, mem.x_prev)?;
        let zt = blk.theta.forward(tape, store, mem.theta_prev)?;
        let ze = blk.code.forward(tape, store, mem.codes)?;
        let ze = tape.repeat_rows(ze, self.cfg.window);
        let a = tape.mul_const(zt, m.clone())?;
        let b = tape.mul_const(ze, m.mapv(|v| S::one() - v))?;
        let zm = tape.add(a, b)?;
        tape.add(zx, zm)
    }

    /// Backbone output `H_L`.
    pub fn backbone_on<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        mem: Option<&MemoryInputs>,
        blend: &[Array2<S>],
    ) -> Result<Var> {
        let (rows, w) = tape.shape(x);
        if w != SPARSE_DIM || rows == 0 || rows % self.cfg.window != 0 {
            return Err(Error::Shape(format!(
                "input {rows}x{w}, expected a multiple of {} rows by {SPARSE_DIM}",
                self.cfg.window
            )));
        }
        if self.cfg.uses_memory() {
            if mem.is_none() {
                return Err(Error::Contract(
                    "memory features are required by this configuration".into(),
                ));
            }
            if blend.len() != self.memory.len() {
                return Err(Error::Shape(format!(
                    "{} blend matrices for {} memory blocks",
                    blend.len(),
                    self.memory.len()
                )));
            }
        }
        let seq = self.cfg.window;
        let mut h = self.input.forward(tape, store, x)?;
        let mut next_mem = 0;
        for (l, blk) in (1..=self.cfg.depth).zip(&self.blocks) {
            h = blk.forward(tape, store, h, seq)?;
            if self.cfg.memory_layers.get(next_mem) == Some(&l) {
                let mem = mem.expect("checked above");
                let z = self.memory_block_on(tape, store, next_mem, mem, &blend[next_mem])?;
                let cat = tape.concat(h, z)?;
                h = self.memory[next_mem].fuse.forward(tape, store, cat)?;
                next_mem += 1;
            }
        }
        Ok(h)
    }

    pub fn heads_on<'a>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, h: Var) -> Result<Outputs> {
        let seq = self.cfg.window;
        let rot = self.rot_head.forward(tape, store, h, seq)?;
        let pos = match &self.pos_head {
            Some(head) => Some(head.forward(tape, store, h, seq)?),
            None => None,
        };
        Ok(Outputs { rot, pos })
    }

    /// Full forward pass with parameters read from `store`, which must be
    /// laid out like `self.store`.
    pub fn forward_with<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        mem: Option<&MemoryInputs>,
        blend: &[Array2<S>],
    ) -> Result<Outputs> {
        let h = self.backbone_on(tape, store, x, mem, blend)?;
        self.heads_on(tape, store, h)
    }

    pub fn forward_on<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        mem: Option<&MemoryInputs>,
        blend: &[Array2<S>],
    ) -> Result<Outputs> {
        self.forward_with(tape, &self.store, x, mem, blend)
    }

    /// Task losses against stacked targets and their weighted total.
    pub fn losses_with<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        out: &Outputs,
        target: &Array2<S>,
        lower: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let seq = self.cfg.window;
        let (gt_rot, gt_pos) = split_targets(target);
        let gr = tape.constant(gt_rot);
        let mut losses = vec![
            loss_theta(tape, out.rot, gr, seq)?,
            loss_rot_velocity(tape, out.rot, gr, seq)?,
        ];
        if let Some(pos) = out.pos {
            let gp = tape.constant(gt_pos);
            losses.push(loss_position(tape, pos, gp, seq)?);
            losses.push(loss_pos_velocity(tape, pos, gp, lower, seq)?);
        }
        let s: Vec<Var> = self.log_vars.iter().map(|&id| tape.param(store, id)).collect();
        let total = total_loss(tape, &losses, self.cfg.weighting, &s)?;
        Ok((total, losses))
    }

    /// Predicted full-body window `T x 198` for one step of inference, and
    /// the multiply-accumulates spent (prior encoder included).
    pub fn infer_window(
        &self,
        prior: Option<&VqVae<S>>,
        skel: &Skeleton,
        x: ArrayView2<'_, S>,
        x_prev: ArrayView2<'_, S>,
        theta_prev: ArrayView2<'_, S>,
        blend: &[Array2<S>],
    ) -> Result<(Array2<S>, u64)> {
        let t = self.cfg.window;
        if x.dim() != (t, SPARSE_DIM) || x_prev.dim() != (t, SPARSE_DIM) || theta_prev.dim() != (t, TARGET_DIM) {
            return Err(Error::Shape(format!(
                "inference windows {:?}, {:?}, {:?} for window length {t}",
                x.dim(),
                x_prev.dim(),
                theta_prev.dim()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_owned());
        let mem = if self.cfg.uses_memory() {
            let prior = prior.ok_or_else(|| Error::Contract("memory blocks need a prior".into()))?;
            if prior.cfg.latent != self.cfg.code_dim || prior.cfg.window != t {
                return Err(Error::Config(format!(
                    "prior (window {}, latent {}) does not match model (window {t}, code_dim {})",
                    prior.cfg.window, prior.cfg.latent, self.cfg.code_dim
                )));
            }
            let xp = tape.constant(x_prev.to_owned());
            let tp = tape.constant(theta_prev.to_owned());
            let z = {
                // The prior's parameters live outside this tape's borrow, so
                // it encodes on its own tape; its work still counts.
                let mut ptape = Tape::new();
                let a = ptape.constant(x_prev.to_owned());
                let b = ptape.constant(theta_prev.to_owned());
                let z = prior.encode_on(&mut ptape, a, b)?;
                (ptape.value(z).clone(), ptape.macs())
            };
            let (_, e) = prior.snap(&z.0);
            let codes = tape.constant(e);
            Some((
                MemoryInputs {
                    x_prev: xp,
                    theta_prev: tp,
                    codes,
                },
                z.1,
            ))
        } else {
            None
        };
        let out = self.forward_on(&mut tape, xv, mem.as_ref().map(|m| &m.0), blend)?;
        let macs = tape.macs() + mem.map(|m| m.1).unwrap_or(0);
        let rot = tape.value(out.rot).clone();
        let pos = match out.pos {
            Some(p) => tape.value(p).clone(),
            None => head_anchored_positions(skel, &rot, &x)?,
        };
        Ok((join_targets(&rot, &pos), macs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.cfg).expect("config serializes");
        Checkpoint::from_store(CHECKPOINT_KIND, meta, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.kind
            )));
        }
        let cfg: MemMlpConfig =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = MemMlp::new(cfg, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Positions from forward kinematics of predicted global rotations, with
/// the skeleton translated so its head matches the tracked head position.
pub fn head_anchored_positions<S: Real>(skel: &Skeleton, rot: &Array2<S>, x: &ArrayView2<'_, S>) -> Result<Array2<S>> {
    let head = skel.tracked()[0];
    let mut pos = Array2::zeros((rot.nrows(), POS_DIM));
    for r in 0..rot.nrows() {
        let mats = (0..JOINTS)
            .map(|j| {
                let six: Vec<f64> = (0..6).map(|c| rot[[r, j * 6 + c]].as_f64()).collect();
                sixd_to_matrix(&Rot6D::from_slice(&six))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = positions_from_global(skel, &mats, &Vec3::zeros());
        let target = Vec3::new(x[[r, 0]].as_f64(), x[[r, 1]].as_f64(), x[[r, 2]].as_f64());
        let shift = target - p[head];
        for j in 0..JOINTS {
            for c in 0..3 {
                pos[[r, j * 3 + c]] = S::of(p[j][c] + shift[c]);
            }
        }
    }
    Ok(pos)
}

#[cfg(test)]
mod tests;
