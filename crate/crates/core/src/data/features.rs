use ndarray::{s, Array2, ArrayView2};

use crate::diffcore::Real;

use super::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, matrix_to_sixd, relative_rotation, GlobalPose, Rot6D, Skeleton, JOINTS};

/// Per tracked joint: position (3), 6D rotation (6), linear velocity (3),
/// angular velocity (6).
pub const SPARSE_PER_JOINT: usize = 18;
pub const SPARSE_DIM: usize = 3 * SPARSE_PER_JOINT;
/// Per joint: 6D global rotation (6) then global position (3).
pub const TARGET_PER_JOINT: usize = 9;
pub const TARGET_DIM: usize = JOINTS * TARGET_PER_JOINT;

/// Sparse features of one frame given the previous frame's global pose.
/// With no previous frame both velocities are zero.
pub fn sparse_frame(prev: Option<&GlobalPose>, cur: &GlobalPose, tracked: [usize; 3], fps: f64) -> [f64; SPARSE_DIM] {
    let mut x = [0.0; SPARSE_DIM];
    let id6 = Rot6D::identity().0;
    for (k, &j) in tracked.iter().enumerate() {
        let o = k * SPARSE_PER_JOINT;
        x[o..o + 3].copy_from_slice(cur.pos[j].as_slice());
        x[o + 3..o + 9].copy_from_slice(&matrix_to_sixd(&cur.rot[j]).0);
        if let Some(p) = prev {
            let v = (cur.pos[j] - p.pos[j]) * fps;
            x[o + 9..o + 12].copy_from_slice(v.as_slice());
            let d = matrix_to_sixd(&relative_rotation(&p.rot[j], &cur.rot[j])).0;
            for c in 0..6 {
                x[o + 12 + c] = (d[c] - id6[c]) * fps;
            }
        }
    }
    x
}

fn target_frame(pose: &GlobalPose) -> [f64; TARGET_DIM] {
    let mut y = [0.0; TARGET_DIM];
    for j in 0..JOINTS {
        let o = j * TARGET_PER_JOINT;
        y[o..o + 6].copy_from_slice(&matrix_to_sixd(&pose.rot[j]).0);
        y[o + 6..o + 9].copy_from_slice(pose.pos[j].as_slice());
    }
    y
}

fn global_pose(clip: &MotionClip, skel: &Skeleton, t: usize) -> GlobalPose {
    forward_kinematics(skel, &clip.frame_matrices(t), &clip.frames[t].root_pos)
}

fn check_window(clip: &MotionClip, t: usize, window: usize) -> Result<()> {
    if window < 2 {
        return Err(Error::InvalidInput(format!(
            "window length must be at least 2, got {window}"
        )));
    }
    if t < window || t >= clip.len() {
        return Err(Error::Range(format!(
            "window of {window} frames ending at {t} needs {window} <= t < {} (one frame of lookback)",
            clip.len()
        )));
    }
    Ok(())
}

/// `window x 54` sparse inputs for frames `t-window+1 ..= t`. Frame
/// `t-window` supplies the velocities of the first row.
pub fn extract_sparse(clip: &MotionClip, skel: &Skeleton, t: usize, window: usize) -> Result<Array2<f64>> {
    check_window(clip, t, window)?;
    let mut out = Array2::zeros((window, SPARSE_DIM));
    let mut prev = global_pose(clip, skel, t - window);
    for (r, f) in (t + 1 - window..=t).enumerate() {
        let cur = global_pose(clip, skel, f);
        let x = sparse_frame(Some(&prev), &cur, skel.tracked(), clip.fps);
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&x[..]));
        prev = cur;
    }
    Ok(out)
}

/// `window x 198` full-body targets for frames `t-window+1 ..= t`,
/// joint-major with the 6D rotation before the position.
pub fn extract_targets(clip: &MotionClip, skel: &Skeleton, t: usize, window: usize) -> Result<Array2<f64>> {
    check_window(clip, t, window)?;
    let mut out = Array2::zeros((window, TARGET_DIM));
    for (r, f) in (t + 1 - window..=t).enumerate() {
        let y = target_frame(&global_pose(clip, skel, f));
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&y[..]));
    }
    Ok(out)
}

/// Sparse inputs and targets of every frame of a clip, computed once.
/// Row 0 of `sparse` has zero velocities.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub name: String,
    pub fps: f64,
    pub sparse: Array2<f64>,
    pub targets: Array2<f64>,
}

impl ClipFeatures {
    pub fn new(clip: &MotionClip, skel: &Skeleton) -> Self {
        let n = clip.len();
        let mut sparse = Array2::zeros((n, SPARSE_DIM));
        let mut targets = Array2::zeros((n, TARGET_DIM));
        let mut prev: Option<GlobalPose> = None;
        for t in 0..n {
            let cur = global_pose(clip, skel, t);
            let x = sparse_frame(prev.as_ref(), &cur, skel.tracked(), clip.fps);
            sparse.row_mut(t).assign(&ndarray::ArrayView1::from(&x[..]));
            targets
                .row_mut(t)
                .assign(&ndarray::ArrayView1::from(&target_frame(&cur)[..]));
            prev = Some(cur);
        }
        ClipFeatures {
            name: clip.name.clone(),
            fps: clip.fps,
            sparse,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.sparse.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sparse_window(&self, end: usize, window: usize) -> ArrayView2<'_, f64> {
        self.sparse.slice(s![end + 1 - window..=end, ..])
    }

    pub fn target_window(&self, end: usize, window: usize) -> ArrayView2<'_, f64> {
        self.targets.slice(s![end + 1 - window..=end, ..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub clip_id: usize,
    pub end_frame: usize,
}

/// One training example: the window ending at `end_frame` and the window
/// ending one frame earlier.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub x_window: Array2<f64>,
    pub target_window: Array2<f64>,
    pub x_prev: Array2<f64>,
    pub target_prev: Array2<f64>,
    pub clip_id: usize,
    pub end_frame: usize,
}

/// Windows over a set of clips. Features are stored once per clip and
/// samples are materialised on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub window: usize,
    pub clips: Vec<ClipFeatures>,
    pub windows: Vec<WindowRef>,
    /// Clips too short for a single window pair.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let w = self.windows[i];
        let c = &self.clips[w.clip_id];
        let t = self.window;
        WindowSample {
            x_window: c.sparse_window(w.end_frame, t).to_owned(),
            target_window: c.target_window(w.end_frame, t).to_owned(),
            x_prev: c.sparse_window(w.end_frame - 1, t).to_owned(),
            target_prev: c.target_window(w.end_frame - 1, t).to_owned(),
            clip_id: w.clip_id,
            end_frame: w.end_frame,
        }
    }
}

/// Windows of a batch stacked along rows: every field is `(B*T) x width`.
#[derive(Debug, Clone)]
pub struct WindowBatch<S> {
    pub window: usize,
    pub x: Array2<S>,
    pub target: Array2<S>,
    pub x_prev: Array2<S>,
    pub target_prev: Array2<S>,
}

impl<S> WindowBatch<S> {
    pub fn batch_size(&self) -> usize {
        self.x.nrows() / self.window
    }
}

impl Dataset {
    /// Stacks the listed windows in order.
    pub fn batch<S: Real>(&self, indices: &[usize]) -> WindowBatch<S> {
        let t = self.window;
        let rows = indices.len() * t;
        let mut b = WindowBatch {
            window: t,
            x: Array2::zeros((rows, SPARSE_DIM)),
            target: Array2::zeros((rows, TARGET_DIM)),
            x_prev: Array2::zeros((rows, SPARSE_DIM)),
            target_prev: Array2::zeros((rows, TARGET_DIM)),
        };
        for (k, &i) in indices.iter().enumerate() {
            let w = self.windows[i];
            let c = &self.clips[w.clip_id];
            let r = s![k * t..(k + 1) * t, ..];
            let conv = |v: &f64| S::of(*v);
            b.x.slice_mut(r).assign(&c.sparse_window(w.end_frame, t).map(conv));
            b.target.slice_mut(r).assign(&c.target_window(w.end_frame, t).map(conv));
            b.x_prev
                .slice_mut(r)
                .assign(&c.sparse_window(w.end_frame - 1, t).map(conv));
            b.target_prev
                .slice_mut(r)
                .assign(&c.target_window(w.end_frame - 1, t).map(conv));
        }
        b
    }
}

/// Every window pair with the given stride. A window ending at `e` needs
/// `e - 1 >= window` so that the previous window also has a lookback frame.
pub fn make_dataset(clips: &[MotionClip], skel: &Skeleton, window: usize, stride: usize) -> Result<Dataset> {
    if window < 2 {
        return Err(Error::InvalidInput(format!(
            "window length must be at least 2, got {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    let mut feats = Vec::with_capacity(clips.len());
    let mut windows = Vec::new();
    let mut skipped = 0;
    for clip in clips {
        if clip.len() < window + 2 {
            log::warn!(
                "skipping clip {} ({} frames, window {window} needs {})",
                clip.name,
                clip.len(),
                window + 2
            );
            skipped += 1;
            continue;
        }
        let clip_id = feats.len();
        windows.extend(
            (window + 1..clip.len())
                .step_by(stride)
                .map(|end_frame| WindowRef { clip_id, end_frame }),
        );
        feats.push(ClipFeatures::new(clip, skel));
    }
    Ok(Dataset {
        window,
        clips: feats,
        windows,
        skipped,
    })
}
