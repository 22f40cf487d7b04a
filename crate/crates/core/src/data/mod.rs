//! Motion clips, synthetic motion, and the sparse-input / full-body target
//! encodings the network consumes.

mod features;
mod synth;

pub use features::{
    extract_sparse, extract_targets, make_dataset, sparse_frame, ClipFeatures, Dataset, WindowBatch, WindowRef,
    WindowSample, SPARSE_DIM, SPARSE_PER_JOINT, TARGET_DIM, TARGET_PER_JOINT,
};
pub use synth::{synth_generate, MotionKind};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{axis_angle_to_matrix, AxisAngle, RotMatrix, Skeleton, Vec3, JOINTS};

pub const DEFAULT_FPS: f64 = 60.0;

const BINARY_MAGIC: &[u8; 4] = b"MCLP";
const BINARY_VERSION: u32 = 1;

/// One frame of a clip: parent-relative joint rotations plus root position.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFrame {
    pub local_rot: Vec<AxisAngle>,
    pub root_pos: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub name: String,
    pub fps: f64,
    pub joint_names: Vec<String>,
    pub frames: Vec<ClipFrame>,
}

#[derive(Serialize, Deserialize)]
struct JsonFrame {
    root: [f64; 3],
    rots: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct JsonClip {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    fps: f64,
    names: Vec<String>,
    frames: Vec<JsonFrame>,
}

impl MotionClip {
    pub fn new(name: impl Into<String>, fps: f64, joint_names: Vec<String>, frames: Vec<ClipFrame>) -> Result<Self> {
        let clip = MotionClip {
            name: name.into(),
            fps,
            joint_names,
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frames.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "clip needs at least 2 frames, has {}",
                self.frames.len()
            )));
        }
        if self.joint_names.len() != JOINTS {
            return Err(Error::Shape(format!(
                "clip names {} joints, expected {JOINTS}",
                self.joint_names.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.local_rot.len() != JOINTS {
                return Err(Error::Shape(format!(
                    "frame {i} has {} joint rotations, expected {JOINTS}",
                    f.local_rot.len()
                )));
            }
            let finite = f.root_pos.iter().all(|v| v.is_finite())
                && f.local_rot.iter().all(|r| r.0.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::NonFinite(format!("frame {i} of clip {}", self.name)));
            }
        }
        Ok(())
    }

    pub fn frame_matrices(&self, t: usize) -> Vec<RotMatrix> {
        self.frames[t]
            .local_rot
            .iter()
            .map(|a| axis_angle_to_matrix(a).expect("validated clip rotations are finite"))
            .collect()
    }

    /// Same motion played backwards.
    pub fn reversed(&self) -> MotionClip {
        let mut c = self.clone();
        c.frames.reverse();
        c
    }

    /// Loads either format; binary files are recognised by their magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes, &stem).map_err(|e| relabel(e, path))
        } else {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path, e))?;
            Self::from_json(text, &stem).map_err(|e| relabel(e, path))
        }
    }

    /// Writes the binary format when the extension is `.mclp`, JSON otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("mclp") => self.to_binary(),
            _ => self.to_json().into_bytes(),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str, default_name: &str) -> Result<Self> {
        let raw: JsonClip = serde_json::from_str(text).map_err(|e| Error::parse("<clip>", e))?;
        let frames = raw
            .frames
            .into_iter()
            .map(|f| ClipFrame {
                local_rot: f.rots.iter().map(|r| AxisAngle::new(r[0], r[1], r[2])).collect(),
                root_pos: Vec3::new(f.root[0], f.root[1], f.root[2]),
            })
            .collect();
        MotionClip::new(
            raw.name.unwrap_or_else(|| default_name.to_string()),
            raw.fps,
            raw.names,
            frames,
        )
    }

    pub fn to_json(&self) -> String {
        let raw = JsonClip {
            name: Some(self.name.clone()),
            fps: self.fps,
            names: self.joint_names.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| JsonFrame {
                    root: [f.root_pos.x, f.root_pos.y, f.root_pos.z],
                    rots: f.local_rot.iter().map(|a| [a.0.x, a.0.y, a.0.z]).collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&raw).expect("clip serializes");
        s.push('\n');
        s
    }

    /// Little-endian: magic `MCLP`, version `u32`, fps `f32`, frame count
    /// `u32`, then per frame the root position (3 x `f32`) followed by 22
    /// axis-angle rotations (66 x `f32`). Joint names are not stored; the
    /// default skeleton's names are used on load.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.frames.len() * (3 + 3 * JOINTS) * 4);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.fps as f32).to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            for v in f.root_pos.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for r in &f.local_rot {
                for v in r.0.iter() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |m: &str| Error::parse("<binary clip>", m);
        if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
            return Err(bad("missing MCLP header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u32_at(4);
        if version != BINARY_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fps = f32_at(8) as f64;
        let count = u32_at(12) as usize;
        let per_frame = (3 + 3 * JOINTS) * 4;
        let body = bytes.len() - 16;
        if body != count * per_frame {
            return Err(Error::Shape(format!(
                "binary clip body is {body} bytes; {count} frames of {JOINTS} joints need {}",
                count * per_frame
            )));
        }
        let mut frames = Vec::with_capacity(count);
        let mut o = 16;
        for _ in 0..count {
            let mut vals = [0.0f64; 3 + 3 * JOINTS];
            for v in vals.iter_mut() {
                *v = f32_at(o) as f64;
                o += 4;
            }
            frames.push(ClipFrame {
                root_pos: Vec3::new(vals[0], vals[1], vals[2]),
                local_rot: (0..JOINTS)
                    .map(|j| AxisAngle::new(vals[3 + 3 * j], vals[4 + 3 * j], vals[5 + 3 * j]))
                    .collect(),
            });
        }
        MotionClip::new(name, fps, Skeleton::default().names().to_vec(), frames)
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { msg, .. } => Error::parse(path, msg),
        other => other,
    }
}
