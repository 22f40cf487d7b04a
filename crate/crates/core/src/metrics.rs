//! Pose-sequence accuracy and smoothness metrics.
//!
//! Rotation errors are in degrees, position errors in centimetres, velocity
//! errors in cm/s and jitter in units of 100 m/s³.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::{MotionClip, TARGET_DIM, TARGET_PER_JOINT};
use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, positions_from_global, sixd_to_matrix, Rot6D, RotMatrix, Skeleton, Vec3, JOINTS,
};

/// Global joint rotations and positions for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub rot: Vec<Vec<RotMatrix>>,
    pub pos: Vec<Vec<Vec3>>,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.rot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rot.is_empty()
    }

    pub fn from_clip(clip: &MotionClip, skel: &Skeleton) -> Self {
        let (rot, pos) = (0..clip.len())
            .map(|t| {
                let g = forward_kinematics(skel, &clip.frame_matrices(t), &clip.frames[t].root_pos);
                (g.rot, g.pos)
            })
            .unzip();
        PoseSequence {
            fps: clip.fps,
            rot,
            pos,
        }
    }

    /// Rows of `6D rotation ++ position` per joint, as the network predicts.
    pub fn from_targets(rows: ArrayView2<'_, f64>, fps: f64) -> Result<Self> {
        if rows.ncols() != TARGET_DIM {
            return Err(Error::Shape(format!(
                "target rows have {} columns, expected {TARGET_DIM}",
                rows.ncols()
            )));
        }
        let mut rot = Vec::with_capacity(rows.nrows());
        let mut pos = Vec::with_capacity(rows.nrows());
        for row in rows.rows() {
            let mut r = Vec::with_capacity(JOINTS);
            let mut p = Vec::with_capacity(JOINTS);
            for j in 0..JOINTS {
                let o = j * TARGET_PER_JOINT;
                let six: Vec<f64> = (0..6).map(|c| row[o + c]).collect();
                r.push(sixd_to_matrix(&Rot6D::from_slice(&six))?);
                p.push(Vec3::new(row[o + 6], row[o + 7], row[o + 8]));
            }
            rot.push(r);
            pos.push(p);
        }
        Ok(PoseSequence { fps, rot, pos })
    }

    /// Replaces positions by forward kinematics of the rotations, anchored at
    /// the given root trajectory.
    pub fn with_fk_positions(mut self, skel: &Skeleton, roots: &[Vec3]) -> Result<Self> {
        if roots.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} root positions for {} frames",
                roots.len(),
                self.len()
            )));
        }
        self.pos = self
            .rot
            .iter()
            .zip(roots)
            .map(|(r, root)| positions_from_global(skel, r, root))
            .collect();
        Ok(self)
    }

    pub fn roots(&self) -> Vec<Vec3> {
        self.pos.iter().map(|p| p[0]).collect()
    }
}

fn check_aligned<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames vs {} ground-truth frames",
            a.len(),
            b.len()
        )));
    }
    if let Some((i, _)) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x.len() != y.len()) {
        return Err(Error::Shape(format!("joint count differs at frame {i}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    Ok(())
}

/// Mean geodesic angle between predicted and true rotations, degrees.
pub fn mpjre(pred: &[Vec<RotMatrix>], gt: &[Vec<RotMatrix>]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            if !a.is_valid(1e-4) || !b.is_valid(1e-4) {
                return Err(Error::DegenerateRotation(format!(
                    "metric input is not a rotation (error {:.2e})",
                    a.orthonormality_error().max(b.orthonormality_error())
                )));
            }
            sum += a.geodesic_angle(b);
            n += 1;
        }
    }
    Ok((sum / n as f64).to_degrees())
}

/// Mean joint position error in cm.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let joints: Vec<usize> = (0..pred[0].len()).collect();
    region_pe(pred, gt, &joints)
}

/// Mean position error in cm over the listed joints only.
pub fn region_pe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], joints: &[usize]) -> Result<f64> {
    check_aligned(pred, gt)?;
    if joints.is_empty() {
        return Err(Error::InvalidInput("empty joint set".into()));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for &j in joints {
            if j >= p.len() {
                return Err(Error::Range(format!("joint {j} of {}", p.len())));
            }
            sum += (p[j] - g[j]).norm();
        }
    }
    Ok(100.0 * sum / (pred.len() * joints.len()) as f64)
}

/// Mean joint velocity error in cm/s.
pub fn mpjve(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], fps: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::InvalidInput("velocity error needs at least 2 frames".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..pred.len() - 1 {
        for j in 0..pred[t].len() {
            let dp = pred[t + 1][j] - pred[t][j];
            let dg = gt[t + 1][j] - gt[t][j];
            sum += (dp - dg).norm();
            n += 1;
        }
    }
    Ok(100.0 * fps * sum / n as f64)
}

/// Mean norm of the third time derivative of joint positions, in 100 m/s³.
pub fn jitter(pos: &[Vec<Vec3>], fps: f64) -> Result<f64> {
    if pos.len() < 4 {
        return Err(Error::InvalidInput("jitter needs at least 4 frames".into()));
    }
    let scale = fps * fps * fps;
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..pos.len() - 3 {
        for j in 0..pos[t].len() {
            let d3 = pos[t + 3][j] - 3.0 * pos[t + 2][j] + 3.0 * pos[t + 1][j] - pos[t][j];
            sum += d3.norm() * scale;
            n += 1;
        }
    }
    Ok(sum / n as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjre: f64,
    pub mpjpe: f64,
    pub hand_pe: f64,
    pub upper_pe: f64,
    pub lower_pe: f64,
    pub root_pe: f64,
    pub mpjve: f64,
    pub jitter: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("mpjre_deg", self.mpjre),
            ("mpjpe_cm", self.mpjpe),
            ("hand_pe_cm", self.hand_pe),
            ("upper_pe_cm", self.upper_pe),
            ("lower_pe_cm", self.lower_pe),
            ("root_pe_cm", self.root_pe),
            ("mpjve_cm_s", self.mpjve),
            ("jitter_1e2_m_s3", self.jitter),
        ]
    }

    /// One `key=value` line per metric.
    pub fn to_text(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}={v:.4}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }
}

/// All metrics of `pred` against `gt`. Jitter is that of the prediction.
pub fn evaluate(pred: &PoseSequence, gt: &PoseSequence, skel: &Skeleton) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let hands = skel.hands();
    Ok(MetricsReport {
        mpjre: mpjre(&pred.rot, &gt.rot)?,
        mpjpe: mpjpe(&pred.pos, &gt.pos)?,
        hand_pe: region_pe(&pred.pos, &gt.pos, &hands)?,
        upper_pe: region_pe(&pred.pos, &gt.pos, skel.upper())?,
        lower_pe: region_pe(&pred.pos, &gt.pos, skel.lower())?,
        root_pe: region_pe(&pred.pos, &gt.pos, &[0])?,
        mpjve: mpjve(&pred.pos, &gt.pos, gt.fps)?,
        jitter: jitter(&pred.pos, gt.fps)?,
    })
}
