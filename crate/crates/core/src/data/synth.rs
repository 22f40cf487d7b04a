use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClipFrame, MotionClip};
use crate::error::Error;
use crate::kinematics::{axis_angle_to_matrix, forward_kinematics, AxisAngle, Skeleton, Vec3, JOINTS};

/// Rest-pose pelvis height of the default skeleton with feet on the ground.
const STAND_HEIGHT: f64 = 0.95;
/// Every synthetic joint rotation stays strictly inside 60 degrees of rest.
const MAX_ANGLE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Walk,
    Sway,
    Squat,
    Still,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [MotionKind::Walk, MotionKind::Sway, MotionKind::Squat, MotionKind::Still];

    fn salt(self) -> u64 {
        match self {
            MotionKind::Walk => 0x5741_4c4b,
            MotionKind::Sway => 0x5357_4159,
            MotionKind::Squat => 0x5351_5554,
            MotionKind::Still => 0x5354_494c,
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionKind::Walk => "walk",
            MotionKind::Sway => "sway",
            MotionKind::Squat => "squat",
            MotionKind::Still => "still",
        })
    }
}

impl FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "walk" => Ok(MotionKind::Walk),
            "sway" => Ok(MotionKind::Sway),
            "squat" => Ok(MotionKind::Squat),
            "still" => Ok(MotionKind::Still),
            other => Err(Error::InvalidInput(format!(
                "unknown motion kind {other:?} (expected walk, sway, squat or still)"
            ))),
        }
    }
}

// Joint indices of the default skeleton.
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const SPINE1: usize = 3;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const SPINE2: usize = 6;
const L_ANKLE: usize = 7;
const R_ANKLE: usize = 8;
const SPINE3: usize = 9;
const NECK: usize = 12;
const HEAD: usize = 15;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;
const L_WRIST: usize = 20;
const R_WRIST: usize = 21;

/// Per-clip random parameters. Angles in radians, frequencies in Hz.
struct Style {
    freq: f64,
    phase: f64,
    amp: [f64; 6],
    speed: f64,
    heading: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng, freq: (f64, f64)) -> Self {
        Style {
            freq: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: std::array::from_fn(|_| rng.random_range(0.8..1.2)),
            speed: rng.random_range(1.0..1.3),
            heading: rng.random_range(-0.3..0.3),
        }
    }
}

/// Deterministic synthetic clip for `(kind, seed)`.
///
/// Poses are driven by smooth periodic joint angles. The root height is
/// chosen so the lowest foot joint stays at its rest height, which keeps the
/// clips free of floating or ground penetration.
pub fn synth_generate(kind: MotionKind, seed: u64, duration_s: f64, fps: f64, skel: &Skeleton) -> MotionClip {
    assert!(duration_s > 0.0 && fps > 0.0, "duration and fps must be positive");
    let n = ((duration_s * fps).round() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.salt().rotate_left(17));
    let style = match kind {
        MotionKind::Walk => Style::draw(&mut rng, (0.8, 1.1)),
        MotionKind::Sway => Style::draw(&mut rng, (0.3, 0.6)),
        MotionKind::Squat => Style::draw(&mut rng, (0.25, 0.45)),
        MotionKind::Still => Style::draw(&mut rng, (1.0, 1.0 + f64::EPSILON)),
    };
    let rest_floor = lowest_foot(skel, &[AxisAngle::new(0.0, 0.0, 0.0); JOINTS], Vec3::zeros());

    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            let (rots, horizontal) = match kind {
                MotionKind::Walk => walk_pose(&style, t),
                MotionKind::Sway => sway_pose(&style, t),
                MotionKind::Squat => squat_pose(&style, t),
                MotionKind::Still => (vec![AxisAngle::new(0.0, 0.0, 0.0); JOINTS], Vec3::zeros()),
            };
            let rots: Vec<AxisAngle> = rots.into_iter().map(clamp_angle).collect();
            let floor = lowest_foot(skel, &rots, Vec3::zeros());
            let root = Vec3::new(
                horizontal.x,
                STAND_HEIGHT + rest_floor - floor + horizontal.y,
                horizontal.z,
            );
            ClipFrame {
                local_rot: rots,
                root_pos: root,
            }
        })
        .collect();

    MotionClip {
        name: format!("{kind}-{seed}"),
        fps,
        joint_names: skel.names().to_vec(),
        frames,
    }
}

fn clamp_angle(a: AxisAngle) -> AxisAngle {
    let n = a.0.norm();
    if n > MAX_ANGLE {
        AxisAngle(a.0 * (MAX_ANGLE / n))
    } else {
        a
    }
}

/// Height of the lowest joint below the hips, relative to the root.
fn lowest_foot(skel: &Skeleton, rots: &[AxisAngle], root: Vec3) -> f64 {
    let mats: Vec<_> = rots
        .iter()
        .map(|a| axis_angle_to_matrix(a).expect("finite synthetic rotation"))
        .collect();
    let pose = forward_kinematics(skel, &mats, &root);
    skel.lower()
        .iter()
        .map(|&j| pose.pos[j].y)
        .fold(f64::INFINITY, f64::min)
}

fn aa(x: f64, y: f64, z: f64) -> AxisAngle {
    AxisAngle::new(x, y, z)
}

/// Legs swing about x in antiphase, arms counter-swing, root moves forward.
/// Returns local rotations and the root offset (x, extra height, z).
fn walk_pose(s: &Style, t: f64) -> (Vec<AxisAngle>, Vec3) {
    let ph = 2.0 * PI * s.freq * t + s.phase;
    let a = &s.amp;
    let hip = 0.38 * a[0];
    let knee = 0.55 * a[1];
    let arm = 0.3 * a[2];
    let mut r = vec![aa(0.0, 0.0, 0.0); JOINTS];

    r[0] = aa(0.0, s.heading + 0.08 * ph.sin(), 0.0);
    r[L_HIP] = aa(-hip * ph.sin(), 0.0, 0.0);
    r[R_HIP] = aa(hip * ph.sin(), 0.0, 0.0);
    r[L_KNEE] = aa(knee * 0.5 * (1.0 + (ph + PI / 3.0).sin()), 0.0, 0.0);
    r[R_KNEE] = aa(knee * 0.5 * (1.0 + (ph + PI + PI / 3.0).sin()), 0.0, 0.0);
    r[L_ANKLE] = aa(-0.15 * ph.cos(), 0.0, 0.0);
    r[R_ANKLE] = aa(0.15 * ph.cos(), 0.0, 0.0);
    r[SPINE1] = aa(0.04, -0.05 * ph.sin(), 0.0);
    r[SPINE3] = aa(0.0, -0.04 * ph.sin(), 0.0);
    r[HEAD] = aa(0.04 * (2.0 * ph).sin() * a[3], 0.0, 0.0);
    r[L_SHOULDER] = aa(0.0, -arm * ph.sin(), -0.75);
    r[R_SHOULDER] = aa(0.0, -arm * ph.sin(), 0.75);
    r[L_ELBOW] = aa(0.0, -0.35 - 0.1 * ph.sin(), 0.0);
    r[R_ELBOW] = aa(0.0, 0.35 - 0.1 * ph.sin(), 0.0);
    r[L_WRIST] = aa(0.1 * ph.cos() * a[4], 0.0, 0.0);
    r[R_WRIST] = aa(-0.1 * ph.cos() * a[5], 0.0, 0.0);

    let dist = s.speed * t;
    let root = Vec3::new(dist * s.heading.sin(), 0.015 * (2.0 * ph).cos(), dist * s.heading.cos());
    (r, root)
}

/// Weight shifts side to side with a counter-bending torso and waving arms.
fn sway_pose(s: &Style, t: f64) -> (Vec<AxisAngle>, Vec3) {
    let ph = 2.0 * PI * s.freq * t + s.phase;
    let a = &s.amp;
    let side = 0.08 * a[0] * ph.sin();
    let mut r = vec![aa(0.0, 0.0, 0.0); JOINTS];

    r[0] = aa(0.0, s.heading, 0.0);
    r[L_HIP] = aa(0.0, 0.0, 0.12 * ph.sin());
    r[R_HIP] = aa(0.0, 0.0, 0.12 * ph.sin());
    r[L_ANKLE] = aa(0.0, 0.0, -0.12 * ph.sin());
    r[R_ANKLE] = aa(0.0, 0.0, -0.12 * ph.sin());
    r[SPINE1] = aa(0.0, 0.0, -0.12 * a[1] * ph.sin());
    r[SPINE2] = aa(0.0, 0.1 * (0.5 * ph).sin(), -0.08 * ph.sin());
    r[NECK] = aa(0.0, 0.0, 0.1 * ph.sin());
    r[HEAD] = aa(0.05 * (2.0 * ph).cos(), 0.1 * a[2] * (0.5 * ph).sin(), 0.0);
    r[L_SHOULDER] = aa(0.0, -0.3 * (ph + 0.5).sin(), -0.5 + 0.25 * a[3] * (2.0 * ph).sin());
    r[R_SHOULDER] = aa(0.0, 0.3 * (ph - 0.5).sin(), 0.5 + 0.25 * a[4] * (2.0 * ph).cos());
    r[L_ELBOW] = aa(0.0, -0.5 - 0.3 * (2.0 * ph).sin(), 0.0);
    r[R_ELBOW] = aa(0.0, 0.5 + 0.3 * (2.0 * ph).cos(), 0.0);
    r[L_WRIST] = aa(0.0, 0.0, 0.2 * a[5] * (3.0 * ph).sin());
    r[R_WRIST] = aa(0.0, 0.0, -0.2 * a[5] * (3.0 * ph).sin());

    (r, Vec3::new(side, 0.0, 0.0))
}

/// Knee bends with arms raised forward for balance.
fn squat_pose(s: &Style, t: f64) -> (Vec<AxisAngle>, Vec3) {
    let ph = 2.0 * PI * s.freq * t + s.phase;
    let a = &s.amp;
    let depth = 0.5 * (1.0 - ph.cos()) * (0.75 + 0.2 * a[0]);
    let mut r = vec![aa(0.0, 0.0, 0.0); JOINTS];

    r[0] = aa(0.25 * depth, s.heading, 0.0);
    r[L_HIP] = aa(-0.9 * depth, 0.0, 0.05);
    r[R_HIP] = aa(-0.9 * depth, 0.0, -0.05);
    r[L_KNEE] = aa(0.95 * depth, 0.0, 0.0);
    r[R_KNEE] = aa(0.95 * depth, 0.0, 0.0);
    r[L_ANKLE] = aa(-0.3 * depth, 0.0, 0.0);
    r[R_ANKLE] = aa(-0.3 * depth, 0.0, 0.0);
    r[SPINE1] = aa(0.15 * depth, 0.0, 0.0);
    r[HEAD] = aa(-0.2 * depth, 0.03 * a[1] * (3.0 * ph).sin(), 0.0);
    r[L_SHOULDER] = aa(0.0, -0.8 * depth * a[2].min(1.0), -0.7 * (1.0 - depth));
    r[R_SHOULDER] = aa(0.0, 0.8 * depth * a[3].min(1.0), 0.7 * (1.0 - depth));
    r[L_ELBOW] = aa(0.0, -0.2 * (1.0 - depth), 0.0);
    r[R_ELBOW] = aa(0.0, 0.2 * (1.0 - depth), 0.0);
    r[L_WRIST] = aa(0.1 * a[4] * ph.sin(), 0.0, 0.0);
    r[R_WRIST] = aa(0.1 * a[5] * ph.sin(), 0.0, 0.0);

    (r, Vec3::zeros())
}
