//! Rotation representations, the articulated skeleton and forward kinematics.
//!
//! Rotation matrices act on column vectors. The 6D representation is the
//! first two matrix columns stacked, `(m00, m10, m20, m01, m11, m21)`, and is
//! mapped back onto SO(3) with Gram-Schmidt.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Joint count of the body model used throughout the pipeline.
pub const JOINTS: usize = 22;

const DEGENERATE_EPS: f64 = 1e-8;

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vec3);

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMatrix(pub Matrix3<f64>);

/// Continuous 6D rotation parameters. Raw values are unconstrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vec3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Equivalent rotation vector with angle in `[0, pi]`. At exactly `pi`
    /// the axis is flipped so its first non-zero component is positive.
    pub fn canonical(&self) -> AxisAngle {
        let angle = self.0.norm();
        if angle == 0.0 || !angle.is_finite() {
            return *self;
        }
        let axis = self.0 / angle;
        let mut a = angle.rem_euclid(2.0 * PI);
        let mut axis = axis;
        if a > PI {
            a = 2.0 * PI - a;
            axis = -axis;
        }
        if (a - PI).abs() < 1e-12 {
            axis = canonical_half_turn_axis(axis);
        }
        AxisAngle(axis * a)
    }
}

fn canonical_half_turn_axis(axis: Vec3) -> Vec3 {
    for k in 0..3 {
        if axis[k].abs() > 1e-12 {
            return if axis[k] < 0.0 { -axis } else { axis };
        }
    }
    axis
}

impl RotMatrix {
    pub fn identity() -> Self {
        RotMatrix(Matrix3::identity())
    }

    /// Rotation of `angle` radians about the z axis.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotMatrix(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotMatrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotMatrix(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn mul(&self, other: &RotMatrix) -> RotMatrix {
        RotMatrix(self.0 * other.0)
    }

    pub fn transpose(&self) -> RotMatrix {
        RotMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Largest deviation of `mᵀm` from identity and of `det m` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        let ortho = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        ortho.max((self.0.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.orthonormality_error() <= tol
    }

    /// Geodesic angle between two rotations, radians.
    pub fn geodesic_angle(&self, other: &RotMatrix) -> f64 {
        let rel = relative_rotation(self, other);
        let cos = ((rel.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin = vee_half(&rel.0).norm();
        sin.atan2(cos)
    }
}

impl Rot6D {
    pub fn identity() -> Self {
        Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut r = [0.0; 6];
        r.copy_from_slice(&s[..6]);
        Rot6D(r)
    }
}

/// `(R - Rᵀ)/2` as a vector; equals `sin(angle) * axis`.
fn vee_half(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix(a: &AxisAngle) -> Result<RotMatrix> {
    if !a.0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "axis-angle has non-finite component: {:?}",
            a.0
        )));
    }
    let angle = a.0.norm();
    if angle == 0.0 {
        return Ok(RotMatrix::identity());
    }
    let k = a.0 / angle;
    let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let (s, c) = angle.sin_cos();
    Ok(RotMatrix(Matrix3::identity() + skew * s + skew * skew * (1.0 - c)))
}

/// Inverse of [`axis_angle_to_matrix`], returning the canonical vector.
pub fn matrix_to_axis_angle(r: &RotMatrix) -> AxisAngle {
    let m = &r.0;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = vee_half(m);
    let sin = vee.norm();
    let angle = sin.atan2(cos);
    if angle < 1e-12 {
        return AxisAngle(Vec3::zeros());
    }
    if angle < PI * 0.5 {
        return AxisAngle(vee * (angle / sin));
    }
    // Near a half turn the skew part vanishes; recover the axis from the
    // symmetric part a aᵀ = (R + Rᵀ - 2 cos I) / (2 (1 - cos)).
    let sym = (m + m.transpose() - Matrix3::identity() * (2.0 * cos)) / (2.0 * (1.0 - cos));
    let mut best = 0;
    for k in 1..3 {
        if sym[(k, k)] > sym[(best, best)] {
            best = k;
        }
    }
    let mut axis: Vec3 = sym.column(best).into_owned();
    axis /= axis.norm();
    if sin > 1e-12 {
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
    } else {
        axis = canonical_half_turn_axis(axis);
    }
    AxisAngle(axis * angle).canonical()
}

pub fn matrix_to_sixd(r: &RotMatrix) -> Rot6D {
    let m = &r.0;
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Gram-Schmidt reconstruction of a rotation from two (unnormalised) columns.
pub fn sixd_to_matrix(s: &Rot6D) -> Result<RotMatrix> {
    let r = &s.0;
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("6D rotation is non-finite: {r:?}")));
    }
    let a = Vec3::new(r[0], r[1], r[2]);
    let c = Vec3::new(r[3], r[4], r[5]);
    let na = a.norm();
    if na < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(format!("first column has norm {na:e}")));
    }
    let b1 = a / na;
    let u = c - b1 * b1.dot(&c);
    let nu = u.norm();
    if nu < DEGENERATE_EPS * c.norm().max(1.0) {
        return Err(Error::DegenerateRotation("columns are collinear".to_string()));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(RotMatrix(Matrix3::from_columns(&[b1, b2, b3])))
}

/// `aᵀ b`: the rotation taking frame `a` to frame `b`.
pub fn relative_rotation(a: &RotMatrix, b: &RotMatrix) -> RotMatrix {
    RotMatrix(a.0.transpose() * b.0)
}

/// Kinematic tree. Joints are stored in topological order: every parent
/// index is smaller than its child index.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    lower: Vec<usize>,
    upper: Vec<usize>,
    names: Vec<String>,
    tracked: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    lower: Vec<usize>,
    upper: Vec<usize>,
    names: Vec<String>,
    /// Head, left hand, right hand.
    #[serde(default)]
    tracked: Option<[usize; 3]>,
}

/// World-frame rotations and positions of every joint.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPose {
    pub rot: Vec<RotMatrix>,
    pub pos: Vec<Vec3>,
}

impl Skeleton {
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        lower: Vec<usize>,
        upper: Vec<usize>,
        names: Vec<String>,
        tracked: [usize; 3],
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::InvalidInput("skeleton has no joints".into()));
        }
        if offsets.len() != n || names.len() != n {
            return Err(Error::Shape(format!(
                "skeleton has {n} parents but {} offsets and {} names",
                offsets.len(),
                names.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidInput("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "joint {i} has parent {p:?}; parents must precede children"
                    )))
                }
            }
        }
        if offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("skeleton offset".into()));
        }
        let mut seen = vec![0u8; n];
        for &j in lower.iter().chain(upper.iter()) {
            if j == 0 || j >= n {
                return Err(Error::Range(format!("body-part joint index {j}")));
            }
            seen[j] += 1;
        }
        if seen.iter().skip(1).any(|&c| c != 1) {
            return Err(Error::InvalidInput(
                "upper and lower sets must partition joints 1..n".into(),
            ));
        }
        if tracked.iter().any(|&j| j >= n) {
            return Err(Error::Range(format!("tracked joints {tracked:?}")));
        }
        Ok(Skeleton {
            parents,
            offsets,
            lower,
            upper,
            names,
            tracked,
        })
    }

    /// Unbranched chain along +x with the given bone lengths; used by tests
    /// and small experiments.
    pub fn chain(lengths: &[f64]) -> Result<Self> {
        let n = lengths.len() + 1;
        let parents = (0..n).map(|i| i.checked_sub(1)).collect();
        let offsets = std::iter::once(Vec3::zeros())
            .chain(lengths.iter().map(|&l| Vec3::new(l, 0.0, 0.0)))
            .collect();
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let upper: Vec<usize> = (1..n).collect();
        let last = n - 1;
        Skeleton::new(parents, offsets, vec![], upper, names, [last, last, last])
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn offset(&self, i: usize) -> Vec3 {
        self.offsets[i]
    }

    pub fn lower(&self) -> &[usize] {
        &self.lower
    }

    pub fn upper(&self) -> &[usize] {
        &self.upper
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Head, left hand and right hand joint indices.
    pub fn tracked(&self) -> [usize; 3] {
        self.tracked
    }

    pub fn hands(&self) -> [usize; 2] {
        [self.tracked[1], self.tracked[2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text).map_err(|e| Error::parse("<skeleton>", e))?;
        let parents = file
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let offsets = file.offsets.iter().map(|o| Vec3::new(o[0], o[1], o[2])).collect();
        let n = file.parents.len();
        let tracked = file
            .tracked
            .unwrap_or(if n == JOINTS { DEFAULT_TRACKED } else { [n - 1; 3] });
        Skeleton::new(parents, offsets, file.lower, file.upper, file.names, tracked)
    }

    pub fn to_json(&self) -> String {
        let file = SkeletonFile {
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            offsets: self.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            names: self.names.clone(),
            tracked: Some(self.tracked),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serializes")
    }

    /// Rest-pose joint positions with the root at the origin.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let rots = vec![RotMatrix::identity(); self.joint_count()];
        forward_kinematics(self, &rots, &Vec3::zeros()).pos
    }
}

const DEFAULT_TRACKED: [usize; 3] = [15, 20, 21];

impl Default for Skeleton {
    /// 22-joint humanoid, y up, facing +z. Lower body is hips, knees, ankles
    /// and feet; everything else above the pelvis is upper body.
    fn default() -> Self {
        #[rustfmt::skip]
        let table: [(&str, i64, [f64; 3]); JOINTS] = [
            ("pelvis",          -1, [0.0, 0.0, 0.0]),
            ("left_hip",         0, [0.07, -0.09, 0.0]),
            ("right_hip",        0, [-0.07, -0.09, 0.0]),
            ("spine1",           0, [0.0, 0.12, 0.0]),
            ("left_knee",        1, [0.0, -0.39, 0.0]),
            ("right_knee",       2, [0.0, -0.39, 0.0]),
            ("spine2",           3, [0.0, 0.14, 0.0]),
            ("left_ankle",       4, [0.0, -0.41, 0.0]),
            ("right_ankle",      5, [0.0, -0.41, 0.0]),
            ("spine3",           6, [0.0, 0.06, 0.0]),
            ("left_foot",        7, [0.0, -0.06, 0.12]),
            ("right_foot",       8, [0.0, -0.06, 0.12]),
            ("neck",             9, [0.0, 0.22, 0.0]),
            ("left_collar",      9, [0.08, 0.14, 0.0]),
            ("right_collar",     9, [-0.08, 0.14, 0.0]),
            ("head",            12, [0.0, 0.1, 0.03]),
            ("left_shoulder",   13, [0.12, 0.04, 0.0]),
            ("right_shoulder",  14, [-0.12, 0.04, 0.0]),
            ("left_elbow",      16, [0.26, 0.0, 0.0]),
            ("right_elbow",     17, [-0.26, 0.0, 0.0]),
            ("left_wrist",      18, [0.25, 0.0, 0.0]),
            ("right_wrist",     19, [-0.25, 0.0, 0.0]),
        ];
        let parents = table
            .iter()
            .map(|t| if t.1 < 0 { None } else { Some(t.1 as usize) })
            .collect();
        let offsets = table.iter().map(|t| Vec3::new(t.2[0], t.2[1], t.2[2])).collect();
        let names = table.iter().map(|t| t.0.to_string()).collect();
        let lower = vec![1, 2, 4, 5, 7, 8, 10, 11];
        let upper = (1..JOINTS).filter(|j| !lower.contains(j)).collect();
        Skeleton::new(parents, offsets, lower, upper, names, DEFAULT_TRACKED).expect("default skeleton is valid")
    }
}

/// Global pose from local joint rotations and the root translation.
pub fn forward_kinematics(skel: &Skeleton, local_rot: &[RotMatrix], root_pos: &Vec3) -> GlobalPose {
    let n = skel.joint_count();
    assert_eq!(local_rot.len(), n, "one local rotation per joint");
    let mut rot = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for i in 0..n {
        match skel.parent(i) {
            None => {
                rot.push(local_rot[i]);
                pos.push(*root_pos);
            }
            Some(p) => {
                let parent_rot: RotMatrix = rot[p];
                let parent_pos: Vec3 = pos[p];
                pos.push(parent_pos + parent_rot.apply(&skel.offset(i)));
                rot.push(parent_rot.mul(&local_rot[i]));
            }
        }
    }
    GlobalPose { rot, pos }
}

/// Joint positions when world-frame rotations are already known.
pub fn positions_from_global(skel: &Skeleton, global_rot: &[RotMatrix], root_pos: &Vec3) -> Vec<Vec3> {
    let n = skel.joint_count();
    assert_eq!(global_rot.len(), n, "one global rotation per joint");
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    for i in 0..n {
        match skel.parent(i) {
            None => pos.push(*root_pos),
            Some(p) => pos.push(pos[p] + global_rot[p].apply(&skel.offset(i))),
        }
    }
    pos
}

/// World-frame rotations to parent-relative rotations.
pub fn global_to_local(skel: &Skeleton, global_rot: &[RotMatrix]) -> Vec<RotMatrix> {
    (0..skel.joint_count())
        .map(|i| match skel.parent(i) {
            None => global_rot[i],
            Some(p) => relative_rotation(&global_rot[p], &global_rot[i]),
        })
        .collect()
}
