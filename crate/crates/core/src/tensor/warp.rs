use super::{FlowField, Tensor};
use crate::error::{Error, Result};

pub struct WarpGrads {
    pub image: Tensor,
    pub flow: Tensor,
}

/// Clamped sample position along one axis: `(i0, i1, frac, inside)`.
/// `inside` is false when the coordinate was clamped, which zeroes the
/// derivative with respect to the flow.
#[inline]
fn axis(pos: f32, len: usize) -> (usize, usize, f32, bool) {
    let max = (len - 1) as f32;
    let inside = pos > 0.0 && pos < max;
    let p = pos.clamp(0.0, max);
    let i0 = (p.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f32, inside)
}

fn check(image: &Tensor, flow: &FlowField) -> Result<()> {
    if image.shape().spatial() != flow.shape().spatial() {
        return Err(Error::Config(format!(
            "warp: image {} and flow {} differ in size",
            image.shape(),
            flow.shape()
        )));
    }
    Ok(())
}

/// `out[c,y,x]` = bilinear sample of `image` at `(x + u, y + v)`, with the
/// sample position clamped to the image (replicate border).
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<Tensor> {
    check(image, flow)?;
    let (h, w) = image.shape().spatial();
    let (u, v) = (flow.u(), flow.v());
    let mut out = Tensor::zeros(image.shape());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, fx, _) = axis(x as f32 + u[p], w);
            let (y0, y1, fy, _) = axis(y as f32 + v[p], h);
            for c in 0..image.channels() {
                let src = image.plane(c);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.plane_mut(c)[p] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp`] with respect to the image and the flow.
pub fn warp_backward(image: &Tensor, flow: &FlowField, grad_out: &Tensor) -> Result<WarpGrads> {
    check(image, flow)?;
    image.same_shape(grad_out, "warp backward")?;
    let (h, w) = image.shape().spatial();
    let (u, v) = (flow.u(), flow.v());
    let mut gimg = Tensor::zeros(image.shape());
    let mut gflow = Tensor::zeros(flow.shape());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, fx, in_x) = axis(x as f32 + u[p], w);
            let (y0, y1, fy, in_y) = axis(y as f32 + v[p], h);
            let (mut du, mut dv) = (0.0f32, 0.0f32);
            for c in 0..image.channels() {
                let g = grad_out.plane(c)[p];
                let src = image.plane(c);
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (cc, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                du += g * ((1.0 - fy) * (b - a) + fy * (d - cc));
                dv += g * ((1.0 - fx) * (cc - a) + fx * (d - b));
                let gi = gimg.plane_mut(c);
                gi[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gi[y0 * w + x1] += g * (1.0 - fy) * fx;
                gi[y1 * w + x0] += g * fy * (1.0 - fx);
                gi[y1 * w + x1] += g * fy * fx;
            }
            if in_x {
                gflow.plane_mut(0)[p] = du;
            }
            if in_y {
                gflow.plane_mut(1)[p] = dv;
            }
        }
    }
    Ok(WarpGrads {
        image: gimg,
        flow: gflow,
    })
}
