//! Hard-edged capsule rasterization and exact ground-truth flow.

use super::noise::Noise;
use super::skeleton::{capsule_contains, Pose, Skeleton};
use crate::error::{Error, Result};
use crate::tensor::{FlowField, Shape, Tensor};

/// Per-pixel owning segment, `-1` for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<i32>,
}

impl SegmentMap {
    pub fn at(&self, x: usize, y: usize) -> i32 {
        self.ids[y * self.width + x]
    }

    /// 8-bit encoding: segment id, 255 for background.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.ids
            .iter()
            .map(|&s| if s < 0 { 255 } else { s as u8 })
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        SegmentMap {
            height,
            width,
            ids: bytes
                .iter()
                .map(|&b| if b == 255 { -1 } else { b as i32 })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Textures {
    /// One noise field per RGB channel, in image coordinates.
    pub background: [Noise; 3],
    /// Per segment: intensity noise in segment-local coordinates and base color.
    pub segments: Vec<(Noise, [f32; 3])>,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Tensor,
    pub segment_map: SegmentMap,
    /// Each figure pixel's position in its segment's local frame
    /// (`(0, 0)` for background pixels).
    pub local_coords: Vec<(f64, f64)>,
}

/// Rasterize `pose` over a background sampled at `(x, y) - bg_offset`.
/// Pixel `(x, y)` is sampled at its integer coordinates.
pub fn render(
    pose: &Pose,
    skeleton: &Skeleton,
    textures: &Textures,
    bg_offset: (f64, f64),
    height: usize,
    width: usize,
) -> Rendered {
    let transforms = skeleton.transforms(pose);
    let order = skeleton.draw_order_top_first();
    let n = height * width;
    let mut image = Tensor::zeros(Shape::new(3, height, width));
    let mut ids = vec![-1i32; n];
    let mut local = vec![(0.0, 0.0); n];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let (px, py) = (x as f64, y as f64);
            let hit = order.iter().find_map(|&s| {
                let (lx, ly) = transforms[s].apply_inverse(px, py);
                capsule_contains(&skeleton.segments[s], lx, ly).then_some((s, lx, ly))
            });
            match hit {
                Some((s, lx, ly)) => {
                    ids[p] = s as i32;
                    local[p] = (lx, ly);
                    let (noise, color) = &textures.segments[s];
                    let shade = (0.3 + 0.7 * noise.sample(lx, ly)) as f32;
                    for c in 0..3 {
                        image.plane_mut(c)[p] = color[c] * shade;
                    }
                }
                None => {
                    let (bx, by) = (px - bg_offset.0, py - bg_offset.1);
                    for c in 0..3 {
                        image.plane_mut(c)[p] =
                            (0.1 + 0.8 * textures.background[c].sample(bx, by)) as f32;
                    }
                }
            }
        }
    }
    Rendered {
        image,
        segment_map: SegmentMap { height, width, ids },
        local_coords: local,
    }
}

/// Exact flow from frame 1 to frame 2.
///
/// Figure pixels follow their segment's rigid motion; background pixels move
/// by `bg_offset2 - bg_offset1`. Flow is defined for every pixel, including
/// ones hidden in frame 2. The mask is 0 only where the target lands outside
/// `[0, W-1] x [0, H-1]`.
///
/// `segment_map` and `local_coords` must come from rendering `pose1`; a
/// figure pixel whose local coordinates do not map back onto it under
/// `pose1` is a configuration error.
pub fn ground_truth_flow(
    pose1: &Pose,
    pose2: &Pose,
    skeleton: &Skeleton,
    segment_map: &SegmentMap,
    local_coords: &[(f64, f64)],
    bg_offset1: (f64, f64),
    bg_offset2: (f64, f64),
) -> Result<(FlowField, Tensor)> {
    let (h, w) = (segment_map.height, segment_map.width);
    if segment_map.ids.len() != h * w || local_coords.len() != h * w {
        return Err(Error::Config(format!(
            "segment map ({}) and local coordinates ({}) do not cover a {w}x{h} frame",
            segment_map.ids.len(),
            local_coords.len()
        )));
    }
    let nseg = skeleton.segments.len() as i32;
    if let Some(bad) = segment_map.ids.iter().find(|&&s| s < -1 || s >= nseg) {
        return Err(Error::Config(format!("segment id {bad} not in skeleton")));
    }
    let t1 = skeleton.transforms(pose1);
    let t2 = skeleton.transforms(pose2);
    let bg = (bg_offset2.0 - bg_offset1.0, bg_offset2.1 - bg_offset1.1);
    let mut flow = FlowField::zeros(h, w);
    let mut mask = Tensor::zeros(Shape::new(1, h, w));
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (fu, fv) = match segment_map.ids[p] {
                -1 => bg,
                s => {
                    let (lx, ly) = local_coords[p];
                    let (sx, sy) = t1[s as usize].apply(lx, ly);
                    if (sx - x as f64).abs() > 1e-6 || (sy - y as f64).abs() > 1e-6 {
                        return Err(Error::Config(format!(
                            "pixel ({x}, {y}) does not match its local coordinates under pose 1"
                        )));
                    }
                    let (tx, ty) = t2[s as usize].apply(lx, ly);
                    (tx - sx, ty - sy)
                }
            };
            let (tx, ty) = (x as f64 + fu, y as f64 + fv);
            if (0.0..=wmax).contains(&tx) && (0.0..=hmax).contains(&ty) {
                mask.data_mut()[p] = 1.0;
            }
            let t = flow.tensor_mut();
            t.plane_mut(0)[p] = fu as f32;
            t.plane_mut(1)[p] = fv as f32;
        }
    }
    Ok((flow, mask))
}

/// Pixels whose flow target is visible in frame 2: all four bilinear
/// neighbours of the target belong to the same segment (or background) as
/// the source pixel in frame 1, and the target lies inside the frame.
pub fn unoccluded_mask(flow: &FlowField, frame1: &SegmentMap, frame2: &SegmentMap) -> Vec<bool> {
    let (h, w) = (frame1.height, frame1.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (tx, ty) = (x as f32 + flow.u()[p], y as f32 + flow.v()[p]);
            if !(tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f32 && ty <= (h - 1) as f32) {
                continue;
            }
            let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let src = frame1.ids[p];
            out[p] = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(a, b)| frame2.at(a, b) == src);
        }
    }
    out
}
