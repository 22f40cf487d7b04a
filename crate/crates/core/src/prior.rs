//! Vector-quantised motion prior.
//!
//! The encoder maps a previous window `(X, Θ)` to one latent vector `z`,
//! which is snapped to its nearest codebook entry `e_k`. The decoder turns a
//! code back into a `T x 198` window and exists only to train the codebook;
//! downstream consumers use the frozen encoder and codebook.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SPARSE_DIM, TARGET_DIM, TARGET_PER_JOINT};
use crate::diffcore::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Checkpoint, ParamId, ParamStore, Real, Tape, Var,
    WeightDecay,
};
use crate::error::{Error, Result};
use crate::kinematics::JOINTS;
use crate::nn::{Dense, Norm};

pub const CHECKPOINT_KIND: &str = "vqvae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub window: usize,
    /// Width of the encoder and decoder blocks.
    pub hidden: usize,
    /// Latent and code width.
    pub latent: usize,
    /// Number of codebook entries.
    pub codes: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Weight of the commitment term.
    pub beta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            window: 41,
            hidden: 512,
            latent: 256,
            codes: 64,
            enc_blocks: 4,
            dec_blocks: 1,
            beta: 0.25,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("prior: {m}")));
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.hidden == 0 || self.latent == 0 {
            return bad("widths must be positive");
        }
        if self.codes == 0 {
            return bad("codebook needs at least one entry");
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("encoder and decoder need at least one block");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be a non-negative number");
        }
        Ok(())
    }

    /// Multiply-accumulates of one encoder pass over a single window.
    pub fn encoder_macs(&self) -> u64 {
        let t = self.window as u64;
        let h = self.hidden as u64;
        let first = t * (SPARSE_DIM + TARGET_DIM) as u64 * h;
        let rest = (self.enc_blocks as u64 - 1) * t * h * h;
        first + rest + h * self.latent as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epoch indices (0-based) at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            epochs: 100,
            batch: 256,
            lr: 1e-4,
            milestones: vec![20, 50, 70],
            gamma: 0.2,
            adam: AdamWConfig {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 1e-4,
                decay: WeightDecay::Coupled,
            },
            seed: 0,
        }
    }
}

impl PriorTrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm: Norm,
    lin: Dense,
}

impl Block {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            norm: Norm::new(store, &format!("{name}.norm"), d_in),
            lin: Dense::new(store, &format!("{name}.lin"), d_in, d_out, rng),
        }
    }

    fn forward<'a, S: Real>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.lin.forward(tape, store, h)?;
        Ok(tape.silu(h))
    }
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
}

#[derive(Debug, Clone)]
pub struct VqVae<S: Real> {
    pub cfg: PriorConfig,
    pub store: ParamStore<S>,
    enc: Vec<Block>,
    enc_out: Dense,
    dec: Vec<Block>,
    dec_out: Dense,
    codebook: ParamId,
}

impl<S: Real> VqVae<S> {
    pub fn new(cfg: PriorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let enc = (0..cfg.enc_blocks)
            .map(|i| {
                let d_in = if i == 0 { SPARSE_DIM + TARGET_DIM } else { h };
                Block::new(&mut store, &format!("enc.{i}"), d_in, h, &mut rng)
            })
            .collect();
        let enc_out = Dense::new(&mut store, "enc.out", h, cfg.latent, &mut rng);
        let dec = (0..cfg.dec_blocks)
            .map(|i| {
                let d_in = if i == 0 { cfg.latent } else { h };
                Block::new(&mut store, &format!("dec.{i}"), d_in, h, &mut rng)
            })
            .collect();
        let dec_out = Dense::new(&mut store, "dec.out", h, cfg.window * TARGET_DIM, &mut rng);
        let bound = 1.0 / cfg.codes as f64;
        let codebook = store.add_uniform_bound("codebook", (cfg.codes, cfg.latent), bound, &mut rng);
        Ok(VqVae {
            cfg,
            store,
            enc,
            enc_out,
            dec,
            dec_out,
            codebook,
        })
    }

    pub fn codebook(&self) -> &Array2<S> {
        self.store.value(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// Same prior at another precision.
    pub fn cast<T: Real>(&self) -> VqVae<T> {
        VqVae {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            enc: self.enc.clone(),
            enc_out: self.enc_out.clone(),
            dec: self.dec.clone(),
            dec_out: self.dec_out.clone(),
            codebook: self.codebook,
        }
    }

    fn check_window_rows(&self, rows: usize, width: usize, expected: usize, what: &str) -> Result<()> {
        if width != expected || rows == 0 || !rows.is_multiple_of(self.cfg.window) {
            return Err(Error::Shape(format!(
                "{what}: {rows}x{width}, expected a multiple of {} rows by {expected}",
                self.cfg.window
            )));
        }
        Ok(())
    }

    /// Latents `B x latent` of stacked windows `(B*T) x 54` and `(B*T) x 198`.
    pub fn encode_on<'a>(&'a self, tape: &mut Tape<'a, S>, x_prev: Var, theta_prev: Var) -> Result<Var> {
        let (rx, cx) = tape.shape(x_prev);
        let (rt, ct) = tape.shape(theta_prev);
        self.check_window_rows(rx, cx, SPARSE_DIM, "prior input X")?;
        self.check_window_rows(rt, ct, TARGET_DIM, "prior input Θ")?;
        if rx != rt {
            return Err(Error::Shape(format!("prior inputs have {rx} and {rt} rows")));
        }
        let mut h = tape.concat(x_prev, theta_prev)?;
        for b in &self.enc {
            h = b.forward(tape, &self.store, h)?;
        }
        let pooled = tape.mean_pool(h, self.cfg.window)?;
        self.enc_out.forward(tape, &self.store, pooled)
    }

    /// Reconstruction `(B*T) x 198` of codes `B x latent`.
    pub fn decode_on<'a>(&'a self, tape: &mut Tape<'a, S>, e: Var) -> Result<Var> {
        let (b, w) = tape.shape(e);
        if w != self.cfg.latent {
            return Err(Error::Shape(format!(
                "decoder input width {w}, expected {}",
                self.cfg.latent
            )));
        }
        let mut h = e;
        for blk in &self.dec {
            h = blk.forward(tape, &self.store, h)?;
        }
        let out = self.dec_out.forward(tape, &self.store, h)?;
        tape.reshape(out, (b * self.cfg.window, TARGET_DIM))
    }

    pub fn encode(&self, x_prev: ArrayView2<'_, S>, theta_prev: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_prev.to_owned());
        let th = tape.constant(theta_prev.to_owned());
        let z = self.encode_on(&mut tape, x, th)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode(&self, e: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let mut tape = Tape::new();
        let v = tape.constant(e.to_owned());
        let out = self.decode_on(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Nearest codebook entry of `z` and its value.
    pub fn quantize(&self, z: ArrayView1<'_, S>) -> (usize, Array2<S>) {
        let k = nearest_code(self.codebook().view(), z);
        (k, self.codebook().slice(s![k..k + 1, ..]).to_owned())
    }

    /// Code indices and code vectors `B x latent` for stacked windows.
    pub fn codes(&self, x_prev: ArrayView2<'_, S>, theta_prev: ArrayView2<'_, S>) -> Result<(Vec<usize>, Array2<S>)> {
        let z = self.encode(x_prev, theta_prev)?;
        Ok(self.snap(&z))
    }

    pub(crate) fn snap(&self, z: &Array2<S>) -> (Vec<usize>, Array2<S>) {
        let ks: Vec<usize> = z
            .rows()
            .into_iter()
            .map(|r| nearest_code(self.codebook().view(), r))
            .collect();
        let mut e = Array2::zeros((ks.len(), self.cfg.latent));
        for (i, &k) in ks.iter().enumerate() {
            e.row_mut(i).assign(&self.codebook().row(k));
        }
        (ks, e)
    }

    /// Full training objective for stacked previous windows; the
    /// reconstruction target is `theta_prev` itself.
    pub fn loss_on<'a>(&'a self, tape: &mut Tape<'a, S>, x_prev: Var, theta_prev: Var) -> Result<VqLoss> {
        let z = self.encode_on(tape, x_prev, theta_prev)?;
        let (ks, _) = self.snap(tape.value(z));
        let cb = tape.param(&self.store, self.codebook);
        let e = tape.gather_rows(cb, ks)?;
        // Straight-through: forward value e, gradient passed to z unchanged.
        let gap = tape.sub(e, z)?;
        let gap = tape.detach(gap);
        let zq = tape.add(z, gap)?;
        let recon = self.decode_on(tape, zq)?;
        vqvae_loss(tape, recon, theta_prev, z, e, self.cfg.beta)
    }

    /// Number of dataset windows assigned to each code.
    pub fn code_usage(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let mut usage = vec![0; self.cfg.codes];
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(256) {
            let b = ds.batch::<S>(chunk);
            let (ks, _) = self.codes(b.x_prev.view(), b.target_prev.view())?;
            for k in ks {
                usage[k] += 1;
            }
        }
        Ok(usage)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.cfg).expect("config serializes");
        Checkpoint::from_store(CHECKPOINT_KIND, meta, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    /// Loads a prior checkpoint. The result is frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.kind
            )));
        }
        let cfg: PriorConfig =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("prior config: {e}")))?;
        let mut prior = VqVae::new(cfg, 0)?;
        ck.load_into(&mut prior.store)?;
        prior.freeze();
        Ok(prior)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Index of the codebook row closest to `z` in Euclidean distance; the
/// lowest index wins ties.
pub fn nearest_code<S: Real>(codebook: ArrayView2<'_, S>, z: ArrayView1<'_, S>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in codebook.rows().into_iter().enumerate() {
        let d: f64 = row
            .iter()
            .zip(z.iter())
            .map(|(a, b)| {
                let diff = a.as_f64() - b.as_f64();
                diff * diff
            })
            .sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Columns holding 6D rotations in a `198`-wide target row.
pub fn rotation_columns() -> Vec<usize> {
    (0..JOINTS)
        .flat_map(|j| (0..6).map(move |c| j * TARGET_PER_JOINT + c))
        .collect()
}

/// `L1(recon rotations) + |sg(z) - e|² + beta |z - sg(e)|²`.
///
/// The rotation term is summed over joints and averaged over frames; the
/// latent terms are averaged over windows.
pub fn vqvae_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    recon: Var,
    gt_theta: Var,
    z: Var,
    e: Var,
    beta: f64,
) -> Result<VqLoss> {
    let frames = tape.shape(recon).0 as f64;
    let windows = tape.shape(z).0 as f64;
    let cols = rotation_columns();
    let r = tape.select_cols(recon, cols.clone())?;
    let g = tape.select_cols(gt_theta, cols)?;
    let d = tape.sub(r, g)?;
    let l1 = tape.sum_abs(d);
    let recon_l = tape.scale(l1, S::of(1.0 / frames));

    let z_sg = tape.detach(z);
    let cd = tape.sub(z_sg, e)?;
    let cb = tape.sum_sq(cd);
    let codebook_l = tape.scale(cb, S::of(1.0 / windows));

    let e_sg = tape.detach(e);
    let md = tape.sub(z, e_sg)?;
    let cm = tape.sum_sq(md);
    let commit_l = tape.scale(cm, S::of(beta / windows));

    let t = tape.add(recon_l, codebook_l)?;
    let total = tape.add(t, commit_l)?;
    Ok(VqLoss {
        total,
        recon: recon_l,
        codebook: codebook_l,
        commit: commit_l,
    })
}

#[derive(Debug, Clone, Default)]
pub struct PriorTrainLog {
    /// Mean total loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Windows per code after training.
    pub usage: Vec<usize>,
}

/// Trains a prior on the previous-window pairs of `ds` and freezes it.
pub fn train_vqvae(ds: &Dataset, model: PriorConfig, cfg: &PriorTrainConfig) -> Result<(VqVae<f32>, PriorTrainLog)> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot train the prior on an empty dataset".into()));
    }
    if model.window != ds.window {
        return Err(Error::Config(format!(
            "prior window {} differs from dataset window {}",
            model.window, ds.window
        )));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "prior training needs positive epochs and batch size".into(),
        ));
    }
    let mut prior = VqVae::<f32>::new(model, cfg.seed)?;
    let mut opt = AdamW::new(&prior.store, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = PriorTrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch = ds.batch::<f32>(chunk);
            let grads = {
                let mut tape = Tape::new();
                let x = tape.constant(batch.x_prev);
                let th = tape.constant(batch.target_prev);
                let loss = prior.loss_on(&mut tape, x, th)?;
                let v = tape.scalar(loss.total).as_f64();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("prior loss at epoch {epoch}")));
                }
                sum += v * chunk.len() as f64;
                tape.backward(loss.total)?
            };
            prior.store.zero_grad();
            prior.store.accumulate(&grads)?;
            opt.step(&mut prior.store, lr)?;
        }
        let mean = sum / ds.len() as f64;
        log::info!("prior epoch {} loss {mean:.5} lr {lr:.2e}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    prior.freeze();
    log.usage = prior.code_usage(ds)?;
    Ok((prior, log))
}

/// Sidecar path holding the code usage histogram of a prior checkpoint.
pub fn usage_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".usage.txt");
    PathBuf::from(s)
}

/// One `code count` line per codebook entry.
pub fn write_usage(checkpoint: &Path, usage: &[usize]) -> Result<()> {
    let text: String = usage.iter().enumerate().map(|(k, n)| format!("{k} {n}\n")).collect();
    let p = usage_path(checkpoint);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, synth_generate, MotionKind};
    use crate::kinematics::Skeleton;
    use ndarray::{array, Array1};
    use rand::Rng;

    fn tiny_cfg() -> PriorConfig {
        PriorConfig {
            window: 4,
            hidden: 8,
            latent: 6,
            codes: 5,
            enc_blocks: 2,
            dec_blocks: 1,
            beta: 0.25,
        }
    }

    fn random_inputs(rows: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((rows, SPARSE_DIM), || rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_simple_fn((rows, TARGET_DIM), || rng.random_range(-1.0..1.0));
        (x, t)
    }

    #[test]
    fn encode_is_deterministic_with_latent_width() {
        let p = VqVae::<f64>::new(PriorConfig::default(), 3).unwrap();
        let (x, t) = random_inputs(41, 1);
        let a = p.encode(x.view(), t.view()).unwrap();
        let b = p.encode(x.view(), t.view()).unwrap();
        assert_eq!(a.dim(), (1, 256));
        assert_eq!(a, b);
        assert!(p.encode(x.slice(s![..40, ..]), t.slice(s![..40, ..])).is_err());
    }

    #[test]
    fn quantize_exact_and_hand_cases() {
        let p = VqVae::<f64>::new(tiny_cfg(), 0).unwrap();
        let e5 = p.codebook().row(3).to_owned();
        let (k, e) = p.quantize(e5.view());
        assert_eq!(k, 3);
        assert_eq!(e.row(0), e5);

        let cb = array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert_eq!(nearest_code(cb.view(), array![0.1, 0.1, 0.1].view()), 0);
        // Equidistant: the lower index wins.
        let tie = array![[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(nearest_code(tie.view(), array![0.0, 0.5].view()), 0);
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = Array2::from_shape_simple_fn((64, 16), || rng.random_range(-1.0..1.0f64));
        for _ in 0..1000 {
            let z = Array1::from_shape_simple_fn(16, || rng.random_range(-1.5..1.5f64));
            let dists: Vec<f64> = cb.rows().into_iter().map(|r| (&r - &z).mapv(|v| v * v).sum()).collect();
            let mut brute = 0;
            for k in 1..dists.len() {
                if dists[k] < dists[brute] {
                    brute = k;
                }
            }
            assert_eq!(nearest_code(cb.view(), z.view()), brute);
        }
    }

    #[test]
    fn loss_endpoints() {
        let mut tape = Tape::<f64>::new();
        let theta = tape.constant(random_inputs(4, 2).1);
        let z = tape.constant(array![[0.3, -0.2]]);
        let e = tape.constant(array![[0.3, -0.2]]);
        let l = vqvae_loss(&mut tape, theta, theta, z, e, 0.25).unwrap();
        assert_eq!(tape.scalar(l.total), 0.0);

        let mut tape = Tape::<f64>::new();
        let (_, a) = random_inputs(2, 3);
        let (_, b) = random_inputs(2, 4);
        let cols = rotation_columns();
        let expected: f64 = cols
            .iter()
            .map(|&c| (0..2).map(|r| (a[[r, c]] - b[[r, c]]).abs()).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        let ra = tape.constant(a);
        let rb = tape.constant(b);
        let z = tape.constant(array![[1.0, 2.0]]);
        let l = vqvae_loss(&mut tape, ra, rb, z, z, 0.0).unwrap();
        assert!((tape.scalar(l.total) - expected).abs() < 1e-12);
    }

    /// Gradients honour the stop-gradients: d/dz sees only the commitment
    /// term and d/de only the codebook term.
    #[test]
    fn latent_term_gradients() {
        let beta = 0.25;
        let zv = array![[0.4, -1.1, 0.7]];
        let ev = array![[0.1, 0.3, -0.2]];
        let mut store = ParamStore::<f64>::new();
        let zid = store.add("z", zv.clone());
        let eid = store.add("e", ev.clone());
        let theta = random_inputs(2, 5).1;
        let mut tape = Tape::new();
        let z = tape.param(&store, zid);
        let e = tape.param(&store, eid);
        let th = tape.constant(theta);
        let l = vqvae_loss(&mut tape, th, th, z, e, beta).unwrap();
        let g = tape.backward(l.total).unwrap();

        let h = 1e-6;
        let commit = |z: &Array2<f64>| beta * (z - &ev).mapv(|v| v * v).sum();
        let book = |e: &Array2<f64>| (&zv - e).mapv(|v| v * v).sum();
        for c in 0..3 {
            let mut zp = zv.clone();
            zp[[0, c]] += h;
            let mut zm = zv.clone();
            zm[[0, c]] -= h;
            let fd = (commit(&zp) - commit(&zm)) / (2.0 * h);
            assert!((g.get(zid).unwrap()[[0, c]] - fd).abs() < 1e-6);
            let mut ep = ev.clone();
            ep[[0, c]] += h;
            let mut em = ev.clone();
            em[[0, c]] -= h;
            let fd = (book(&ep) - book(&em)) / (2.0 * h);
            assert!((g.get(eid).unwrap()[[0, c]] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn codebook_learns_only_from_codebook_term() {
        let p = VqVae::<f64>::new(tiny_cfg(), 1).unwrap();
        let (x, t) = random_inputs(8, 6);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let tv = tape.constant(t);
        let l = p.loss_on(&mut tape, xv, tv).unwrap();
        let without = tape.add(l.recon, l.commit).unwrap();
        let g = tape.backward(without).unwrap();
        let cb = g
            .get(p.codebook_id())
            .map(|a| a.iter().all(|v| *v == 0.0))
            .unwrap_or(true);
        assert!(cb);
        // The straight-through path still trains the encoder from the
        // reconstruction term.
        let enc = p.store.find("enc.0.lin.w").unwrap();
        assert!(g.get(enc).unwrap().iter().any(|v| *v != 0.0));

        let mut tape = Tape::new();
        let (x, t) = random_inputs(8, 6);
        let xv = tape.constant(x);
        let tv = tape.constant(t);
        let l = p.loss_on(&mut tape, xv, tv).unwrap();
        let g = tape.backward(l.total).unwrap();
        assert!(g.get(p.codebook_id()).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decode_shape_and_finiteness() {
        let p = VqVae::<f64>::new(tiny_cfg(), 2).unwrap();
        let (x, t) = random_inputs(12, 7);
        let (ks, e) = p.codes(x.view(), t.view()).unwrap();
        assert_eq!(ks.len(), 3);
        let r = p.decode(e.view()).unwrap();
        assert_eq!(r.dim(), (12, TARGET_DIM));
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn milestone_schedule() {
        let c = PriorTrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(19), 1e-4);
        assert!((c.lr_at(20) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at(50) - 4e-6).abs() < 1e-18);
        assert!((c.lr_at(99) - 8e-7).abs() < 1e-18);
    }

    fn small_dataset(kind: MotionKind, window: usize) -> Dataset {
        let skel = Skeleton::default();
        let clips: Vec<_> = (0..4).map(|s| synth_generate(kind, s, 2.0, 30.0, &skel)).collect();
        make_dataset(&clips, &skel, window, 2).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_freezes() {
        let ds = small_dataset(MotionKind::Walk, 8);
        let model = PriorConfig {
            window: 8,
            hidden: 32,
            latent: 16,
            codes: 8,
            ..PriorConfig::default()
        };
        let cfg = PriorTrainConfig {
            epochs: 5,
            batch: 16,
            lr: 1e-3,
            ..PriorTrainConfig::default()
        };
        let (mut prior, log) = train_vqvae(&ds, model, &cfg).unwrap();
        assert_eq!(log.epoch_losses.len(), 5);
        assert!(log.epoch_losses[4] < log.epoch_losses[0], "{:?}", log.epoch_losses);
        assert_eq!(log.usage.iter().sum::<usize>(), ds.len());
        assert!(prior.is_frozen());
        let mut opt = AdamW::new(&prior.store, AdamWConfig::default());
        assert!(matches!(opt.step(&mut prior.store, 1e-3), Err(Error::Frozen(_))));
        prior.freeze();
    }

    #[test]
    fn still_training_improves_reconstruction() {
        let ds = small_dataset(MotionKind::Still, 6);
        let model = PriorConfig {
            window: 6,
            hidden: 32,
            latent: 8,
            codes: 4,
            ..PriorConfig::default()
        };
        let recon_l1 = |p: &VqVae<f32>| {
            let b = ds.batch::<f32>(&[0, 1, 2]);
            let (_, e) = p.codes(b.x_prev.view(), b.target_prev.view()).unwrap();
            let r = p.decode(e.view()).unwrap();
            rotation_columns()
                .iter()
                .map(|&c| {
                    (0..r.nrows())
                        .map(|i| (r[[i, c]] - b.target_prev[[i, c]]).abs() as f64)
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let untrained = VqVae::<f32>::new(model.clone(), 0).unwrap();
        let cfg = PriorTrainConfig {
            epochs: 40,
            batch: 16,
            lr: 3e-3,
            ..PriorTrainConfig::default()
        };
        let (trained, _) = train_vqvae(&ds, model, &cfg).unwrap();
        assert!(recon_l1(&trained) < recon_l1(&untrained));
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.ckpt");
        let p = VqVae::<f32>::new(tiny_cfg(), 9).unwrap();
        p.save(&path).unwrap();
        write_usage(&path, &[1, 2, 0, 0, 5]).unwrap();
        let q = VqVae::<f32>::load(&path).unwrap();
        assert!(q.is_frozen());
        let (x, t) = random_inputs(8, 8);
        let (x, t) = (x.mapv(|v| v as f32), t.mapv(|v| v as f32));
        let a = p.encode(x.view(), t.view()).unwrap();
        let b = q.encode(x.view(), t.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        let text = std::fs::read_to_string(usage_path(&path)).unwrap();
        assert_eq!(text.lines().nth(4), Some("4 5"));

        let mut ck = p.to_checkpoint();
        ck.kind = "memmlp".into();
        assert!(VqVae::<f32>::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::diffcore::gradcheck::{check_gradients, GradCheck};
        let p = VqVae::<f64>::new(tiny_cfg(), 4).unwrap();
        let (x, t) = random_inputs(8, 10);
        let report = check_gradients(&p.store, GradCheck::default(), |tape, store| {
            let xv = tape.constant(x.clone());
            let tv = tape.constant(t.clone());
            let mut h = tape.concat(xv, tv)?;
            for b in &p.enc {
                h = b.forward(tape, store, h)?;
            }
            let pooled = tape.mean_pool(h, 4)?;
            let z = p.enc_out.forward(tape, store, pooled)?;
            let sq = tape.sum_sq(z);
            Ok(sq)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
