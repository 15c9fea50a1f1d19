//! Synthetic articulated-figure image pairs with exact dense ground truth.
//!
//! A 10-segment capsule figure is posed twice (the second pose perturbs the
//! first by bounded joint, root and background motion), rendered over a
//! procedural background, and the ground-truth flow follows each frame-1
//! pixel through its segment's rigid transform.

mod dataset;
pub mod noise;
mod render;
pub mod skeleton;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, load_dataset, Dataset, Manifest, ManifestEntry};
pub use render::{ground_truth_flow, render, unoccluded_mask, Rendered, SegmentMap, Textures};
pub use skeleton::{default_joint_ranges, Pose, Rigid, Skeleton, NUM_SEGMENTS, SEGMENT_NAMES};

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Tensor};
use noise::Noise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    /// Independent joint, root and background motion.
    Articulated,
    /// Figure and background move together by one 2-D offset: constant flow.
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSpec {
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub base_cell: f64,
    /// Base RGB color per segment, indexed like [`SEGMENT_NAMES`].
    pub segment_colors: Vec<[f32; 3]>,
    /// Per-sample random color jitter added to each base channel.
    pub color_jitter: f32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            octaves: 3,
            base_cell: 8.0,
            segment_colors: vec![
                [0.85, 0.25, 0.20],
                [0.95, 0.80, 0.60],
                [0.20, 0.45, 0.90],
                [0.95, 0.75, 0.55],
                [0.15, 0.35, 0.75],
                [0.85, 0.65, 0.50],
                [0.25, 0.70, 0.30],
                [0.90, 0.85, 0.20],
                [0.20, 0.55, 0.25],
                [0.75, 0.70, 0.15],
            ],
            color_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: MotionMode,
    /// Joint-angle range per segment, radians.
    pub joint_ranges: Vec<(f64, f64)>,
    /// Largest per-joint angle change between frames, radians.
    pub max_joint_delta: f64,
    /// Largest root displacement between frames, pixels.
    pub max_root_motion: f64,
    /// Largest root rotation between frames, radians.
    pub max_root_rotation: f64,
    /// Largest background displacement between frames, pixels.
    pub max_background_motion: f64,
    /// Largest whole-scene displacement in translation mode, pixels.
    pub max_translation: f64,
    /// Upper bound on any ground-truth flow vector; defaults to `width / 4`.
    pub max_displacement: Option<f64>,
    pub texture: TextureSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            samples: 100,
            seed: 0,
            mode: MotionMode::Articulated,
            joint_ranges: default_joint_ranges(),
            max_joint_delta: 0.15,
            max_root_motion: 4.0,
            max_root_rotation: 0.05,
            max_background_motion: 3.0,
            max_translation: 6.0,
            max_displacement: None,
            texture: TextureSpec::default(),
        }
    }
}

impl GenConfig {
    pub fn displacement_bound(&self) -> f64 {
        self.max_displacement.unwrap_or(self.width as f64 / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "resolution {}x{} is below 16x16",
                self.width, self.height
            ));
        }
        if self.joint_ranges.len() != NUM_SEGMENTS {
            return bad(format!(
                "need {NUM_SEGMENTS} joint ranges, got {}",
                self.joint_ranges.len()
            ));
        }
        if self
            .joint_ranges
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return bad("joint ranges must be finite with lo <= hi".into());
        }
        let motions = [
            self.max_joint_delta,
            self.max_root_motion,
            self.max_root_rotation,
            self.max_background_motion,
            self.max_translation,
        ];
        if motions.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("motion limits must be finite and non-negative".into());
        }
        let bound = self.displacement_bound();
        let quarter = self.width as f64 / 4.0;
        if !(bound > 0.0 && bound <= quarter) {
            return bad(format!(
                "max_displacement {bound} must be in (0, {quarter}]"
            ));
        }
        let direct = match self.mode {
            MotionMode::Translation => self.max_translation,
            MotionMode::Articulated => self.max_root_motion.max(self.max_background_motion),
        };
        if direct > bound {
            return bad(format!(
                "configured motion {direct} exceeds the displacement bound {bound}"
            ));
        }
        let t = &self.texture;
        if t.octaves == 0 || !(t.base_cell > 0.0) {
            return bad("texture needs at least one octave and a positive cell size".into());
        }
        if t.segment_colors.len() != NUM_SEGMENTS
            || t.segment_colors
                .iter()
                .flatten()
                .any(|c| !(0.0..=1.0).contains(c))
        {
            return bad(format!(
                "need {NUM_SEGMENTS} segment colors with channels in [0, 1]"
            ));
        }
        if !(0.0..=0.5).contains(&t.color_jitter) {
            return bad("color_jitter must be in [0, 0.5]".into());
        }
        Ok(())
    }
}

/// One synthetic training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image1: Tensor,
    pub image2: Tensor,
    pub gt_flow: FlowField,
    /// 1 where the flow target lies inside the frame, else 0.
    pub valid_mask: Tensor,
    /// Frame-1 segment ownership.
    pub segment_map: SegmentMap,
}

/// Uniform draw in `[-max, max]`; exactly 0 when `max` is 0.
fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// Uniform point in the disc of radius `max`.
fn disc(rng: &mut ChaCha8Rng, max: f64) -> (f64, f64) {
    if max <= 0.0 {
        return (0.0, 0.0);
    }
    let r = max * rng.gen_range(0.0f64..1.0).sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * a.cos(), r * a.sin())
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draw a pose uniformly within the configured ranges and a second pose
/// perturbed by bounded deltas (joint angles clamped to their ranges).
pub fn sample_pose_pair(rng: &mut ChaCha8Rng, config: &GenConfig) -> (Pose, Pose) {
    let (h, w) = (config.height as f64, config.width as f64);
    let root = (
        uniform(rng, (0.35 * w, 0.65 * w)),
        uniform(rng, (0.5 * h, 0.6 * h)),
    );
    let root_angle = uniform(
        rng,
        (
            -std::f64::consts::FRAC_PI_2 - 0.3,
            -std::f64::consts::FRAC_PI_2 + 0.3,
        ),
    );
    let mut joints = [0.0; NUM_SEGMENTS];
    for (j, &range) in joints.iter_mut().zip(&config.joint_ranges) {
        *j = uniform(rng, range);
    }
    let pose1 = Pose {
        root,
        root_angle,
        joints,
    };

    let mut pose2 = pose1.clone();
    match config.mode {
        MotionMode::Translation => {
            let (dx, dy) = disc(rng, config.max_translation);
            pose2.root = (root.0 + dx, root.1 + dy);
        }
        MotionMode::Articulated => {
            let (dx, dy) = disc(rng, config.max_root_motion);
            pose2.root = (root.0 + dx, root.1 + dy);
            pose2.root_angle += symmetric(rng, config.max_root_rotation);
            for (j, &(lo, hi)) in pose2.joints.iter_mut().zip(&config.joint_ranges) {
                *j = (*j + symmetric(rng, config.max_joint_delta)).clamp(lo, hi);
            }
        }
    }
    (pose1, pose2)
}

fn sample_textures(rng: &mut ChaCha8Rng, spec: &TextureSpec) -> Textures {
    let noise = |rng: &mut ChaCha8Rng, cell: f64| Noise {
        seed: rng.gen(),
        octaves: spec.octaves,
        base_cell: cell,
    };
    let background = [
        noise(rng, spec.base_cell),
        noise(rng, spec.base_cell),
        noise(rng, spec.base_cell),
    ];
    let segments = spec
        .segment_colors
        .iter()
        .map(|base| {
            let n = noise(rng, spec.base_cell / 2.0);
            let mut color = *base;
            for c in &mut color {
                *c = (*c + symmetric(rng, spec.color_jitter as f64) as f32).clamp(0.0, 1.0);
            }
            (n, color)
        })
        .collect();
    Textures {
        background,
        segments,
    }
}

/// Maximum rejection-sampling attempts per sample before giving up.
const MAX_ATTEMPTS: usize = 1000;

/// One draw of everything random about a sample: textures, both poses and
/// both background offsets.
pub(crate) struct Scene {
    pub textures: Textures,
    pub pose1: Pose,
    pub pose2: Pose,
    pub bg1: (f64, f64),
    pub bg2: (f64, f64),
}

pub(crate) fn draw_scene(rng: &mut ChaCha8Rng, config: &GenConfig) -> Scene {
    let textures = sample_textures(rng, &config.texture);
    let (pose1, pose2) = sample_pose_pair(rng, config);
    let bg1 = (rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0));
    let shift = match config.mode {
        MotionMode::Translation => (pose2.root.0 - pose1.root.0, pose2.root.1 - pose1.root.1),
        MotionMode::Articulated => disc(rng, config.max_background_motion),
    };
    let bg2 = (bg1.0 + shift.0, bg1.1 + shift.1);
    Scene {
        textures,
        pose1,
        pose2,
        bg1,
        bg2,
    }
}

pub(crate) fn sample_rng(config: &GenConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    rng
}

/// Generate sample `index` of the dataset described by `config`. Each index
/// has its own random stream, so samples can be produced in any order.
pub fn generate_sample(config: &GenConfig, skeleton: &Skeleton, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(config, index);
    let (h, w) = (config.height, config.width);
    let bound = config.displacement_bound();
    for _ in 0..MAX_ATTEMPTS {
        let sc = draw_scene(&mut rng, config);
        let r1 = render(&sc.pose1, skeleton, &sc.textures, sc.bg1, h, w);
        let (gt_flow, valid_mask) = ground_truth_flow(
            &sc.pose1,
            &sc.pose2,
            skeleton,
            &r1.segment_map,
            &r1.local_coords,
            sc.bg1,
            sc.bg2,
        )?;
        if gt_flow.magnitudes().iter().any(|&m| m as f64 > bound) {
            continue;
        }
        let r2 = render(&sc.pose2, skeleton, &sc.textures, sc.bg2, h, w);
        return Ok(Sample {
            id: format!("{index:05}"),
            image1: r1.image,
            image2: r2.image,
            gt_flow,
            valid_mask,
            segment_map: r1.segment_map,
        });
    }
    Err(Error::Config(format!(
        "could not draw sample {index} within the displacement bound {bound} after {MAX_ATTEMPTS} attempts"
    )))
}

/// All samples of `config`, in index order.
pub fn generate_samples(config: &GenConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let skeleton = Skeleton::humanoid(config.height);
    (0..config.samples)
        .map(|i| generate_sample(config, &skeleton, i))
        .collect()
}

#[cfg(test)]
mod tests;
