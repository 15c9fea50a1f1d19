//! Planar kinematic tree of capsule-shaped segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SEGMENTS: usize = 10;

pub const SEGMENT_NAMES: [&str; NUM_SEGMENTS] = [
    "torso",
    "head",
    "upper_arm_l",
    "forearm_l",
    "upper_arm_r",
    "forearm_r",
    "thigh_l",
    "shin_l",
    "thigh_r",
    "shin_r",
];

/// Rotation followed by translation: `p -> R(theta) p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        cos: 1.0,
        sin: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Rigid {
            cos: angle.cos(),
            sin: angle.sin(),
            tx,
            ty,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.cos * x - self.sin * y + self.tx,
            self.sin * x + self.cos * y + self.ty,
        )
    }

    #[inline]
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.tx, y - self.ty);
        (
            self.cos * dx + self.sin * dy,
            -self.sin * dx + self.cos * dy,
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        let (tx, ty) = self.apply(other.tx, other.ty);
        Rigid {
            cos: self.cos * other.cos - self.sin * other.sin,
            sin: self.sin * other.cos + self.cos * other.sin,
            tx,
            ty,
        }
    }
}

/// One rigid body part. Its local frame has the origin at the joint and the
/// x-axis along the bone; the capsule covers every point within `half_width`
/// of the segment from `(0, 0)` to `(length, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub parent: Option<usize>,
    /// Joint position in the parent's local frame.
    pub attach: (f64, f64),
    pub length: f64,
    pub half_width: f64,
    /// Draw order; higher values are drawn on top.
    pub z: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub segments: Vec<Segment>,
}

/// Root placement plus one joint angle per segment, relative to the parent
/// (the torso's angle is added to the root orientation).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root: (f64, f64),
    pub root_angle: f64,
    pub joints: [f64; NUM_SEGMENTS],
}

/// Default joint-angle ranges in radians, indexed like [`SEGMENT_NAMES`].
pub fn default_joint_ranges() -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    vec![
        (0.0, 0.0),
        (-0.35, 0.35),
        (PI - 1.3, PI + 0.2),
        (-1.4, 0.1),
        (PI - 0.2, PI + 1.3),
        (-0.1, 1.4),
        (PI - 0.6, PI + 0.15),
        (0.0, 1.3),
        (PI - 0.15, PI + 0.6),
        (-1.3, 0.0),
    ]
}

impl Skeleton {
    /// A humanoid proportioned for an image `height` pixels tall (64 is the
    /// reference size).
    pub fn humanoid(height: usize) -> Self {
        let s = height as f64 / 64.0;
        let seg = |name: &str,
                   parent: Option<usize>,
                   attach: (f64, f64),
                   length: f64,
                   half_width: f64,
                   z: u32| Segment {
            name: name.to_string(),
            parent,
            attach: (attach.0 * s, attach.1 * s),
            length: length * s,
            half_width: half_width * s,
            z,
        };
        Skeleton {
            segments: vec![
                seg("torso", None, (0.0, 0.0), 14.0, 4.0, 4),
                seg("head", Some(0), (14.0, 0.0), 5.0, 3.5, 5),
                seg("upper_arm_l", Some(0), (12.5, -3.0), 8.5, 1.8, 8),
                seg("forearm_l", Some(2), (8.5, 0.0), 8.0, 1.5, 9),
                seg("upper_arm_r", Some(0), (12.5, 3.0), 8.5, 1.8, 1),
                seg("forearm_r", Some(4), (8.5, 0.0), 8.0, 1.5, 0),
                seg("thigh_l", Some(0), (0.0, -2.0), 10.5, 2.4, 6),
                seg("shin_l", Some(6), (10.5, 0.0), 10.0, 2.0, 7),
                seg("thigh_r", Some(0), (0.0, 2.0), 10.5, 2.4, 3),
                seg("shin_r", Some(8), (10.5, 0.0), 10.0, 2.0, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.segments.len();
        if n != NUM_SEGMENTS {
            return Err(Error::Config(format!(
                "skeleton needs {NUM_SEGMENTS} segments, got {n}"
            )));
        }
        let roots = self.segments.iter().filter(|s| s.parent.is_none()).count();
        if roots != 1 || self.segments[0].parent.is_some() {
            return Err(Error::Config(
                "skeleton must have the torso (index 0) as its only root".into(),
            ));
        }
        for (i, s) in self.segments.iter().enumerate() {
            // Parents precede children, which rules out cycles.
            if let Some(p) = s.parent {
                if p >= i {
                    return Err(Error::Config(format!(
                        "segment {i} has parent {p} that does not precede it"
                    )));
                }
            }
            if !(s.length > 0.0 && s.half_width > 0.0) {
                return Err(Error::Config(format!(
                    "segment {i} needs positive length and half-width"
                )));
            }
        }
        let mut z: Vec<u32> = self.segments.iter().map(|s| s.z).collect();
        z.sort_unstable();
        if z != (0..n as u32).collect::<Vec<_>>() {
            return Err(Error::Config(
                "draw orders must be a permutation of 0..10".into(),
            ));
        }
        Ok(())
    }

    /// World transform of every segment's local frame.
    pub fn transforms(&self, pose: &Pose) -> Vec<Rigid> {
        let mut out: Vec<Rigid> = Vec::with_capacity(self.segments.len());
        for (i, s) in self.segments.iter().enumerate() {
            let t = match s.parent {
                None => Rigid::new(pose.root_angle + pose.joints[i], pose.root.0, pose.root.1),
                Some(p) => out[p].compose(&Rigid::new(pose.joints[i], s.attach.0, s.attach.1)),
            };
            out.push(t);
        }
        out
    }

    /// Segment indices from top-most to bottom-most.
    pub fn draw_order_top_first(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.segments.len()).collect();
        idx.sort_by_key(|&i| std::cmp::Reverse(self.segments[i].z));
        idx
    }
}

/// Whether the local point lies inside the capsule of `seg`.
#[inline]
pub fn capsule_contains(seg: &Segment, lx: f64, ly: f64) -> bool {
    let cx = lx.clamp(0.0, seg.length);
    let (dx, dy) = (lx - cx, ly);
    dx * dx + dy * dy <= seg.half_width * seg.half_width
}
