//! End-to-end commands behind the command-line tool: synthesis, prior and
//! model training, evaluation, streaming inference and benchmarking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_dataset, synth_generate, ClipFeatures, MotionClip, MotionKind};
use crate::error::{Error, Result};
use crate::ik::{frame_positions, ik_refine, LbfgsConfig};
use crate::kinematics::Skeleton;
use crate::metrics::{evaluate, MetricsReport, PoseSequence};
use crate::model::{train as train_model, LossRecord, MemMlp, MemMlpConfig, TrainConfig};
use crate::prior::{train_vqvae, write_usage, PriorConfig, PriorTrainConfig, PriorTrainLog, VqVae};
use crate::runtime::{
    bench as run_bench, frames_to_rows, infer_offline, rows_to_clip, stream_all, BenchReport, FrameStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Frames between consecutive training windows.
    pub stride: usize,
    /// Skeleton description; the built-in skeleton when absent.
    pub skeleton: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            stride: 1,
            skeleton: None,
        }
    }
}

/// Everything a command may need. Every section is optional in a config
/// file; missing values take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seeds of both training stages when set.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub prior: PriorConfig,
    pub prior_train: PriorTrainConfig,
    pub model: MemMlpConfig,
    pub train: TrainConfig,
    pub ik: LbfgsConfig,
}

impl RunConfig {
    /// Pushes the global seed into the stage configs.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.prior_train.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ik.validate()?;
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        if self.model.uses_memory()
            && (self.prior.window != self.model.window || self.prior.latent != self.model.code_dim)
        {
            return Err(Error::Config(format!(
                "prior (window {}, latent {}) must match model (window {}, code_dim {})",
                self.prior.window, self.prior.latent, self.model.window, self.model.code_dim
            )));
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        match &self.data.skeleton {
            Some(p) => Skeleton::load(p),
            None => Ok(Skeleton::default()),
        }
    }
}

/// Sizes the worker pool used by frame-parallel work. Call once, before
/// any parallel work starts.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn is_clip_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "mclp"))
}

/// A clip file, or every clip file of a directory in name order.
pub fn load_clips(path: &Path) -> Result<Vec<MotionClip>> {
    if !path.is_dir() {
        return Ok(vec![MotionClip::load(path)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_clip_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .json or .mclp clips in {}",
            path.display()
        )));
    }
    files.iter().map(|p| MotionClip::load(p)).collect()
}

/// Writes `count` clips with seeds `seed..seed + count` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn synth(
    kind: MotionKind,
    seed: u64,
    count: usize,
    duration_s: f64,
    fps: f64,
    binary: bool,
    out_dir: &Path,
    skel: &Skeleton,
) -> Result<Vec<PathBuf>> {
    if !(duration_s > 0.0 && duration_s.is_finite() && fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!(
            "duration {duration_s} and fps {fps} must be positive"
        )));
    }
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = if binary { "mclp" } else { "json" };
    (0..count as u64)
        .map(|i| {
            let s = seed + i;
            let mut clip = synth_generate(kind, s, duration_s, fps, skel);
            clip.name = format!("{kind}_{s:04}");
            let path = out_dir.join(format!("{}.{ext}", clip.name));
            clip.save(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn train_prior(clips: &[MotionClip], cfg: &RunConfig, out: &Path) -> Result<(VqVae<f32>, PriorTrainLog)> {
    let skel = cfg.skeleton()?;
    let ds = make_dataset(clips, &skel, cfg.prior.window, cfg.data.stride)?;
    log::info!(
        "prior dataset: {} windows from {} clips ({} too short)",
        ds.len(),
        clips.len(),
        ds.skipped
    );
    let (prior, log) = train_vqvae(&ds, cfg.prior.clone(), &cfg.prior_train)?;
    prior.save(out)?;
    write_usage(out, &log.usage)?;
    Ok((prior, log))
}

/// Sidecar path holding the per-step training losses of a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut text = String::from("step,total,theta,rv,p,fv,lr\n");
    for r in log {
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.total, r.theta, r.rv, r.p, r.fv, r.lr
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_prior(path: Option<&Path>, model: &MemMlpConfig) -> Result<Option<VqVae<f32>>> {
    match (path, model.uses_memory()) {
        (Some(p), _) => Ok(Some(VqVae::load(p)?)),
        (None, false) => Ok(None),
        (None, true) => Err(Error::Config("this model has memory blocks and needs --prior".into())),
    }
}

pub fn train(
    clips: &[MotionClip],
    prior: Option<&VqVae<f32>>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(MemMlp<f32>, Vec<LossRecord>)> {
    let skel = cfg.skeleton()?;
    let ds = make_dataset(clips, &skel, cfg.model.window, cfg.data.stride)?;
    log::info!(
        "training dataset: {} windows from {} clips ({} too short)",
        ds.len(),
        clips.len(),
        ds.skipped
    );
    let prior = if cfg.model.uses_memory() { prior } else { None };
    let (model, log) = train_model(cfg.model.clone(), cfg.train.clone(), &ds, prior, &skel)?;
    model.save(out)?;
    write_loss_log(&loss_log_path(out), &log)?;
    Ok((model, log))
}

/// Metrics of the three prediction pathways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub frames: usize,
    /// Rotations from the rotation head, positions from the position head.
    pub position_branch: MetricsReport,
    /// Rotations from the rotation head, positions by forward kinematics
    /// from the predicted root.
    pub rotation_branch: MetricsReport,
    /// Rotation head refined toward the position head, then forward
    /// kinematics.
    pub ik: Option<MetricsReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("clips={}\nframes={}\n", self.clips, self.frames);
        let mut section = |name: &str, r: &MetricsReport| {
            s.push_str(&format!("[{name}]\n"));
            s.push_str(&r.to_text());
        };
        section("position_branch", &self.position_branch);
        section("rotation_branch", &self.rotation_branch);
        if let Some(r) = &self.ik {
            section("ik", r);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Frame-weighted mean of per-clip reports.
fn weighted(reports: &[(MetricsReport, usize)]) -> MetricsReport {
    let total: usize = reports.iter().map(|(_, n)| n).sum();
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|(r, n)| f(r) * *n as f64).sum::<f64>() / total as f64;
    MetricsReport {
        mpjre: mean(|r| r.mpjre),
        mpjpe: mean(|r| r.mpjpe),
        hand_pe: mean(|r| r.hand_pe),
        upper_pe: mean(|r| r.upper_pe),
        lower_pe: mean(|r| r.lower_pe),
        root_pe: mean(|r| r.root_pe),
        mpjve: mean(|r| r.mpjve),
        jitter: mean(|r| r.jitter),
    }
}

fn subset(seq: &PoseSequence, from: usize) -> PoseSequence {
    PoseSequence {
        fps: seq.fps,
        rot: seq.rot[from..].to_vec(),
        pos: seq.pos[from..].to_vec(),
    }
}

/// Offline evaluation on frames where the model ran (placeholders excluded).
pub fn eval(
    model: &MemMlp<f32>,
    prior: Option<&VqVae<f32>>,
    clips: &[MotionClip],
    skel: &Skeleton,
    ik: Option<&LbfgsConfig>,
) -> Result<EvalReport> {
    let (mut pb, mut rb, mut ikr) = (Vec::new(), Vec::new(), Vec::new());
    let mut frames = 0;
    for clip in clips {
        let feats = ClipFeatures::new(clip, skel);
        let out = infer_offline(feats.sparse.view(), model, prior, skel)?;
        let Some(first) = out.iter().position(|f| f.status != FrameStatus::Placeholder) else {
            log::warn!("clip {} is shorter than one window; skipped", clip.name);
            continue;
        };
        let n = out.len() - first;
        if n < 4 {
            log::warn!("clip {} has only {n} predicted frames; skipped", clip.name);
            continue;
        }
        let rows = frames_to_rows(&out[first..]);
        let gt = subset(&PoseSequence::from_clip(clip, skel), first);
        let pred = PoseSequence::from_targets(rows.view(), clip.fps)?;
        pb.push((evaluate(&pred, &gt, skel)?, n));
        let fk = pred.clone().with_fk_positions(skel, &pred.roots())?;
        rb.push((evaluate(&fk, &gt, skel)?, n));
        if let Some(cfg) = ik {
            let refined = ik_refine(skel, &pred.rot, &pred.pos, cfg)?;
            let seq = PoseSequence {
                fps: clip.fps,
                rot: refined.iter().map(|f| f.global_rot.clone()).collect(),
                pos: refined.iter().map(|f| frame_positions(skel, f)).collect(),
            };
            ikr.push((evaluate(&seq, &gt, skel)?, n));
        }
        frames += n;
    }
    if pb.is_empty() {
        return Err(Error::InvalidInput("no clip is long enough to evaluate".into()));
    }
    Ok(EvalReport {
        clips: pb.len(),
        frames,
        position_branch: weighted(&pb),
        rotation_branch: weighted(&rb),
        ik: ik.map(|_| weighted(&ikr)),
    })
}

/// Streams a clip's sparse signals through the model and returns the
/// predicted clip, optionally refined by inverse kinematics.
pub fn infer(
    model: &MemMlp<f32>,
    prior: Option<&VqVae<f32>>,
    clip: &MotionClip,
    skel: &Skeleton,
    ik: Option<&LbfgsConfig>,
) -> Result<MotionClip> {
    let feats = ClipFeatures::new(clip, skel);
    let out = stream_all(feats.sparse.view(), model, prior, skel)?;
    let faults = out.iter().filter(|f| f.status == FrameStatus::Fault).count();
    if faults > 0 {
        log::warn!("{faults} frames repeated after non-finite model output");
    }
    let name = format!("{}_pred", clip.name);
    let predicted = rows_to_clip(frames_to_rows(&out).view(), skel, clip.fps, &name)?;
    let Some(cfg) = ik else {
        return Ok(predicted);
    };
    let seq = PoseSequence::from_targets(frames_to_rows(&out).view(), clip.fps)?;
    let refined = ik_refine(skel, &seq.rot, &seq.pos, cfg)?;
    let mut clip_out = predicted;
    for ((frame, f), st) in clip_out.frames.iter_mut().zip(&refined).zip(&out) {
        if st.status == FrameStatus::Placeholder {
            continue;
        }
        frame.local_rot = crate::kinematics::global_to_local(skel, &f.global_rot)
            .iter()
            .map(crate::kinematics::matrix_to_axis_angle)
            .collect();
        frame.root_pos = f.root;
    }
    Ok(clip_out)
}

pub fn bench(
    model: &MemMlp<f32>,
    prior: Option<&VqVae<f32>>,
    skel: &Skeleton,
    frames: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    run_bench(model, prior, skel, frames, warmup, seed)
}
