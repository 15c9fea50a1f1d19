//! Middlebury color-wheel flow visualization.

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Shape, Tensor};

/// Hue-bin counts: red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxNorm {
    /// 99th-percentile magnitude of the field, floored at 1e-6.
    Auto,
    Fixed(f32),
}

/// The 55-entry RGB wheel, each channel in `0..=255`.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    // (channel that ramps, direction, channel held at 255) for each segment.
    let ramps: [(usize, bool, usize); 6] = [
        (1, true, 0),
        (0, false, 1),
        (2, true, 1),
        (1, false, 2),
        (0, true, 2),
        (2, false, 0),
    ];
    for (&n, &(ramp, up, full)) in SEGMENTS.iter().zip(&ramps) {
        for i in 0..n {
            let step = (255 * i / n) as f32;
            let mut rgb = [0.0f32; 3];
            rgb[full] = 255.0;
            rgb[ramp] = if up { step } else { 255.0 - step };
            wheel.push(rgb);
        }
    }
    wheel
}

fn percentile_99(mut mags: Vec<f32>) -> f32 {
    mags.sort_by(f32::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).max(1);
    mags[rank - 1]
}

/// Render `flow` as an RGB image in `[0, 1]`. Hue follows the flow direction,
/// saturation its magnitude relative to `max_norm` (clamped to 1). Zero flow
/// is white.
pub fn flow_to_color(flow: &FlowField, max_norm: MaxNorm) -> Result<Tensor> {
    if !flow.is_finite() {
        return Err(Error::Numeric("cannot visualize non-finite flow".into()));
    }
    let norm = match max_norm {
        MaxNorm::Fixed(n) if n > 0.0 && n.is_finite() => n,
        MaxNorm::Fixed(n) => {
            return Err(Error::Config(format!("max_norm must be positive, got {n}")))
        }
        MaxNorm::Auto => percentile_99(flow.magnitudes()).max(1e-6),
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let (h, w) = flow.shape().spatial();
    let mut out = Tensor::zeros(Shape::new(3, h, w));
    for p in 0..h * w {
        let (u, v) = (flow.u()[p] / norm, flow.v()[p] / norm);
        let rad = (u * u + v * v).sqrt().min(1.0);
        let a = (-v).atan2(-u) / std::f32::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f32;
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            out.plane_mut(c)[p] = 1.0 - rad * (1.0 - col);
        }
    }
    Ok(out)
}
