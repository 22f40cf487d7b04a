//! Streaming autoregressive inference, its offline equivalent, FLOPs
//! accounting and latency benchmarking.
//!
//! Each step predicts the window ending at the newest frame and emits that
//! window's last row. The prediction is kept and fed to the memory blocks
//! as `Θ̂` on the next step; the previous window's sparse input is the
//! buffer shifted back by one frame, padded with its oldest frame while the
//! stream is younger than `T + 1` frames.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{
    synth_generate, ClipFeatures, ClipFrame, MotionClip, MotionKind, SPARSE_DIM, TARGET_DIM, TARGET_PER_JOINT,
};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::kinematics::{global_to_local, matrix_to_axis_angle, matrix_to_sixd, RotMatrix, Skeleton, Vec3};
use crate::metrics::PoseSequence;
use crate::model::{MemMlp, MemMlpConfig};
use crate::prior::{PriorConfig, VqVae};

/// How an emitted frame was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    /// Fewer than `T` frames buffered; rest pose under the tracked head.
    Placeholder,
    Predicted,
    /// The model produced non-finite values; the last good frame repeats.
    Fault,
}

/// One emitted full-body frame: per joint a global 6D rotation then a
/// global position, as in the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub row: Vec<f64>,
    pub status: FrameStatus,
}

/// Per-stream inference state.
#[derive(Debug, Clone)]
pub struct StreamState {
    window: usize,
    buffer: VecDeque<Vec<f64>>,
    prev_pred: Option<Array2<f64>>,
    frame: u64,
    last_good: Option<Vec<f64>>,
    faults: u64,
}

impl StreamState {
    pub fn new(window: usize) -> Self {
        StreamState {
            window,
            buffer: VecDeque::with_capacity(window + 1),
            prev_pred: None,
            frame: 0,
            last_good: None,
            faults: 0,
        }
    }

    pub fn frames_seen(&self) -> u64 {
        self.frame
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn faults(&self) -> u64 {
        self.faults
    }

    pub fn previous_prediction(&self) -> Option<&Array2<f64>> {
        self.prev_pred.as_ref()
    }
}

/// Rest pose translated so its head sits at the tracked head position.
pub fn placeholder_frame(skel: &Skeleton, sparse: &[f64]) -> Vec<f64> {
    let rest = skel.rest_positions();
    let head = skel.tracked()[0];
    let shift = Vec3::new(sparse[0], sparse[1], sparse[2]) - rest[head];
    let id = matrix_to_sixd(&RotMatrix::identity()).0;
    let mut row = vec![0.0; TARGET_DIM];
    for (j, p) in rest.iter().enumerate() {
        let o = j * TARGET_PER_JOINT;
        row[o..o + 6].copy_from_slice(&id);
        let q = p + shift;
        row[o + 6..o + 9].copy_from_slice(q.as_slice());
    }
    row
}

fn to_real<S: Real>(a: ArrayView2<'_, f64>) -> Array2<S> {
    a.mapv(S::of)
}

/// Shared inference step. `x` holds the `T` newest frames and `x_prev` the
/// `T` frames one step earlier.
fn predict_step<S: Real>(
    model: &MemMlp<S>,
    prior: Option<&VqVae<S>>,
    skel: &Skeleton,
    x: ArrayView2<'_, f64>,
    x_prev: ArrayView2<'_, f64>,
    theta_prev: Option<&Array2<f64>>,
    frame: u64,
) -> Result<Array2<f64>> {
    let t = model.cfg.window;
    let zeros;
    let theta = match theta_prev {
        Some(p) => p.view(),
        None => {
            zeros = Array2::<f64>::zeros((t, TARGET_DIM));
            zeros.view()
        }
    };
    let blend = model.inference_blend(frame);
    let (out, _) = model.infer_window(
        prior,
        skel,
        to_real::<S>(x).view(),
        to_real::<S>(x_prev).view(),
        to_real::<S>(theta).view(),
        &blend,
    )?;
    Ok(out.mapv(|v| v.as_f64()))
}

/// Result of a predicted window: the emitted frame and the state updates.
fn finish(
    skel: &Skeleton,
    pred: Array2<f64>,
    sparse: &[f64],
    last_good: &mut Option<Vec<f64>>,
    prev_pred: &mut Option<Array2<f64>>,
    faults: &mut u64,
) -> StreamFrame {
    if pred.iter().all(|v| v.is_finite()) {
        let row = pred.row(pred.nrows() - 1).to_vec();
        *last_good = Some(row.clone());
        *prev_pred = Some(pred);
        StreamFrame {
            row,
            status: FrameStatus::Predicted,
        }
    } else {
        *faults += 1;
        log::warn!("non-finite model output; repeating the last good frame");
        StreamFrame {
            row: last_good.clone().unwrap_or_else(|| placeholder_frame(skel, sparse)),
            status: FrameStatus::Fault,
        }
    }
}

/// Consumes one sparse frame and emits one full-body frame.
pub fn stream_step<S: Real>(
    state: &mut StreamState,
    sparse: &[f64],
    model: &MemMlp<S>,
    prior: Option<&VqVae<S>>,
    skel: &Skeleton,
) -> Result<StreamFrame> {
    let t = model.cfg.window;
    if state.window != t {
        return Err(Error::Config(format!(
            "stream window {} for a model window {t}",
            state.window
        )));
    }
    if sparse.len() != SPARSE_DIM {
        return Err(Error::Shape(format!(
            "sparse frame of {} values, expected {SPARSE_DIM}",
            sparse.len()
        )));
    }
    if sparse.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "sparse input at stream frame {}",
            state.frame
        )));
    }
    state.buffer.push_back(sparse.to_vec());
    if state.buffer.len() > t + 1 {
        state.buffer.pop_front();
    }
    let frame = state.frame;
    state.frame += 1;
    if state.buffer.len() < t {
        return Ok(StreamFrame {
            row: placeholder_frame(skel, sparse),
            status: FrameStatus::Placeholder,
        });
    }
    let mut hist = Array2::zeros((t + 1, SPARSE_DIM));
    let pad = t + 1 - state.buffer.len();
    for r in 0..=t {
        let src = &state.buffer[r.saturating_sub(pad)];
        hist.row_mut(r).assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    let pred = predict_step(
        model,
        prior,
        skel,
        hist.slice(s![1.., ..]),
        hist.slice(s![..t, ..]),
        state.prev_pred.as_ref(),
        frame,
    )?;
    Ok(finish(
        skel,
        pred,
        sparse,
        &mut state.last_good,
        &mut state.prev_pred,
        &mut state.faults,
    ))
}

/// Streams every row of `sparse` (`n x 54`).
pub fn stream_all<S: Real>(
    sparse: ArrayView2<'_, f64>,
    model: &MemMlp<S>,
    prior: Option<&VqVae<S>>,
    skel: &Skeleton,
) -> Result<Vec<StreamFrame>> {
    let mut state = StreamState::new(model.cfg.window);
    sparse
        .rows()
        .into_iter()
        .map(|r| stream_step(&mut state, &r.to_vec(), model, prior, skel))
        .collect()
}

/// Sliding-window inference over a whole sequence by slicing instead of
/// buffering; equal to [`stream_all`] on the same input.
pub fn infer_offline<S: Real>(
    sparse: ArrayView2<'_, f64>,
    model: &MemMlp<S>,
    prior: Option<&VqVae<S>>,
    skel: &Skeleton,
) -> Result<Vec<StreamFrame>> {
    let t = model.cfg.window;
    if sparse.ncols() != SPARSE_DIM {
        return Err(Error::Shape(format!("sparse input has {} columns", sparse.ncols())));
    }
    if sparse.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sparse input".into()));
    }
    let n = sparse.nrows();
    let mut out = Vec::with_capacity(n);
    let (mut last_good, mut prev_pred, mut faults) = (None, None, 0);
    for i in 0..n {
        let row = sparse.row(i).to_vec();
        if i + 1 < t {
            out.push(StreamFrame {
                row: placeholder_frame(skel, &row),
                status: FrameStatus::Placeholder,
            });
            continue;
        }
        let x = sparse.slice(s![i + 1 - t..=i, ..]);
        // The first window has no earlier frame; repeat its oldest one.
        let x_prev = if i >= t {
            sparse.slice(s![i - t..i, ..]).to_owned()
        } else {
            let mut p = Array2::zeros((t, SPARSE_DIM));
            p.row_mut(0).assign(&sparse.row(0));
            p.slice_mut(s![1.., ..]).assign(&sparse.slice(s![..t - 1, ..]));
            p
        };
        let pred = predict_step(model, prior, skel, x, x_prev.view(), prev_pred.as_ref(), i as u64)?;
        out.push(finish(skel, pred, &row, &mut last_good, &mut prev_pred, &mut faults));
    }
    Ok(out)
}

/// Emitted frames stacked as `n x 198`.
pub fn frames_to_rows(frames: &[StreamFrame]) -> Array2<f64> {
    let mut a = Array2::zeros((frames.len(), TARGET_DIM));
    for (mut r, f) in a.axis_iter_mut(Axis(0)).zip(frames) {
        r.assign(&ndarray::ArrayView1::from(f.row.as_slice()));
    }
    a
}

/// Motion clip of predicted rows, rooted at the predicted root position.
pub fn rows_to_clip(rows: ArrayView2<'_, f64>, skel: &Skeleton, fps: f64, name: &str) -> Result<MotionClip> {
    let seq = PoseSequence::from_targets(rows, fps)?;
    let frames = seq
        .rot
        .iter()
        .zip(&seq.pos)
        .map(|(rot, pos)| ClipFrame {
            local_rot: global_to_local(skel, rot).iter().map(matrix_to_axis_angle).collect(),
            root_pos: pos[0],
        })
        .collect();
    MotionClip::new(name, fps, skel.names().to_vec(), frames)
}

/// Multiply-accumulates of one inference step: network plus, when memory
/// blocks are configured, one prior encoder pass.
pub fn flops_count(model: &MemMlpConfig, prior: Option<&PriorConfig>) -> u64 {
    let enc = if model.uses_memory() {
        prior.map(PriorConfig::encoder_macs).unwrap_or(0)
    } else {
        0
    };
    model.macs() + enc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub fps: f64,
    pub window: usize,
    pub width: usize,
    pub depth: usize,
    pub memory_layers: Vec<usize>,
    pub macs: u64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let rows = [
            ("frames", self.frames.to_string()),
            ("warmup", self.warmup.to_string()),
            ("mean latency (ms)", format!("{:.4}", self.mean_ms)),
            ("median latency (ms)", format!("{:.4}", self.median_ms)),
            ("p99 latency (ms)", format!("{:.4}", self.p99_ms)),
            ("throughput (fps)", format!("{:.1}", self.fps)),
            ("window", self.window.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("memory layers", format!("{:?}", self.memory_layers)),
            ("GMACs per step", format!("{:.4}", self.macs as f64 / 1e9)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<22}{v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times `frames` streaming steps after `warmup` untimed ones on a seeded
/// synthetic walk, replayed as often as needed.
pub fn bench<S: Real>(
    model: &MemMlp<S>,
    prior: Option<&VqVae<S>>,
    skel: &Skeleton,
    frames: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::InvalidInput("bench needs at least one frame".into()));
    }
    let clip = synth_generate(MotionKind::Walk, seed, 10.0, crate::data::DEFAULT_FPS, skel);
    let feats = ClipFeatures::new(&clip, skel);
    let n = feats.sparse.nrows();
    let mut state = StreamState::new(model.cfg.window);
    // Start with a full buffer so every timed step runs the network.
    for i in 0..model.cfg.window + warmup {
        stream_step(&mut state, &feats.sparse.row(i % n).to_vec(), model, prior, skel)?;
    }
    let mut ms = Vec::with_capacity(frames);
    for i in 0..frames {
        let row = feats.sparse.row((model.cfg.window + warmup + i) % n).to_vec();
        let start = Instant::now();
        let out = stream_step(&mut state, &row, model, prior, skel)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mean = ms.iter().sum::<f64>() / frames as f64;
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if frames % 2 == 1 {
        sorted[frames / 2]
    } else {
        0.5 * (sorted[frames / 2 - 1] + sorted[frames / 2])
    };
    let p99 = sorted[((frames as f64 * 0.99).ceil() as usize).clamp(1, frames) - 1];
    Ok(BenchReport {
        frames,
        warmup,
        mean_ms: mean,
        median_ms: median,
        p99_ms: p99,
        fps: 1000.0 / mean,
        window: model.cfg.window,
        width: model.cfg.width,
        depth: model.cfg.depth,
        memory_layers: model.cfg.memory_layers.clone(),
        macs: flops_count(&model.cfg, prior.map(|p| &p.cfg)),
    })
}
