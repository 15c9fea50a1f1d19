use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// 2x2 box filter. Odd trailing rows/columns average the truncated block.
pub fn avg_downsample2x(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.height < 2 || s.width < 2 {
        return Err(Error::Config(format!(
            "downsample needs H, W >= 2, got {s}"
        )));
    }
    let (oh, ow) = (s.height.div_ceil(2), s.width.div_ceil(2));
    let mut out = Tensor::zeros(Shape::new(s.channels, oh, ow));
    for c in 0..s.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 2).min(s.height));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 2).min(s.width));
                let mut sum = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += src[y * s.width + x];
                    }
                }
                dst[oy * ow + ox] = sum / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_downsample2x`] for an input of shape `input_shape`.
pub fn avg_downsample2x_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let (oh, ow) = (
        input_shape.height.div_ceil(2),
        input_shape.width.div_ceil(2),
    );
    if grad_out.shape() != Shape::new(input_shape.channels, oh, ow) {
        return Err(Error::Shape(format!(
            "downsample backward: gradient {} does not match input {input_shape}",
            grad_out.shape()
        )));
    }
    let (h, w) = input_shape.spatial();
    let mut grad = Tensor::zeros(input_shape);
    for c in 0..input_shape.channels {
        let g = grad_out.plane(c);
        let dst = grad.plane_mut(c);
        for y in 0..h {
            let oy = y / 2;
            let ny = (2 * oy + 2).min(h) - 2 * oy;
            for x in 0..w {
                let ox = x / 2;
                let nx = (2 * ox + 2).min(w) - 2 * ox;
                dst[y * w + x] = g[oy * ow + ox] / (ny * nx) as f32;
            }
        }
    }
    Ok(grad)
}

/// Source coordinate and bilinear taps for align-corners resampling.
#[inline]
fn taps(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let src = i as f32 * (in_len - 1) as f32 / (out_len - 1) as f32;
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f32)
}

fn check_upsample(input: Shape, out_h: usize, out_w: usize) -> Result<()> {
    let ok = |n: usize, out: usize| out == 2 * n || out + 1 == 2 * n;
    if out_h < input.height || out_w < input.width {
        return Err(Error::Config(format!(
            "upsample target {out_h}x{out_w} is smaller than input {input}"
        )));
    }
    if !ok(input.height, out_h) || !ok(input.width, out_w) {
        return Err(Error::Config(format!(
            "upsample target {out_h}x{out_w} is not a 2x size of {input}"
        )));
    }
    Ok(())
}

/// Align-corners bilinear upsampling to `out_h x out_w`, which must be
/// `2n - 1` or `2n` along each axis.
pub fn bilinear_upsample2x(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    check_upsample(s, out_h, out_w)?;
    let xt: Vec<_> = (0..out_w).map(|x| taps(x, out_w, s.width)).collect();
    let mut out = Tensor::zeros(Shape::new(s.channels, out_h, out_w));
    for c in 0..s.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..out_h {
            let (y0, y1, fy) = taps(oy, out_h, s.height);
            let r0 = &src[y0 * s.width..(y0 + 1) * s.width];
            let r1 = &src[y1 * s.width..(y1 + 1) * s.width];
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample2x`].
pub fn bilinear_upsample2x_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let (out_h, out_w) = grad_out.shape().spatial();
    check_upsample(input_shape, out_h, out_w)?;
    if grad_out.channels() != input_shape.channels {
        return Err(Error::Shape(format!(
            "upsample backward: {} channels vs {}",
            grad_out.channels(),
            input_shape.channels
        )));
    }
    let w = input_shape.width;
    let xt: Vec<_> = (0..out_w).map(|x| taps(x, out_w, w)).collect();
    let mut grad = Tensor::zeros(input_shape);
    for c in 0..input_shape.channels {
        let g = grad_out.plane(c);
        let dst = grad.plane_mut(c);
        for oy in 0..out_h {
            let (y0, y1, fy) = taps(oy, out_h, input_shape.height);
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: Shape) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn downsample_constant_and_block_mean() {
        let t = Tensor::filled(Shape::new(2, 5, 3), 0.37);
        let d = avg_downsample2x(&t).unwrap();
        assert_eq!(d.shape(), Shape::new(2, 3, 2));
        assert!(d.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
        let b = Tensor::from_vec(Shape::new(1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(avg_downsample2x(&b).unwrap().data(), &[1.5]);
    }

    #[test]
    fn downsample_matches_block_mean_oracle() {
        let t = random(3, Shape::new(1, 5, 5));
        let d = avg_downsample2x(&t).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut vals = Vec::new();
                for y in [2 * oy, 2 * oy + 1] {
                    for x in [2 * ox, 2 * ox + 1] {
                        if y < 5 && x < 5 {
                            vals.push(t.at(0, y, x) as f64);
                        }
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((d.at(0, oy, ox) as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsample_preserves_mean_on_even_sizes() {
        let t = random(4, Shape::new(3, 8, 6));
        let d = avg_downsample2x(&t).unwrap();
        assert!((t.mean() - d.mean()).abs() < 1e-6);
    }

    #[test]
    fn downsample_rejects_tiny_input() {
        assert!(avg_downsample2x(&Tensor::zeros(Shape::new(1, 1, 4))).is_err());
    }

    #[test]
    fn upsample_midpoint_and_constant() {
        let row = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(
            bilinear_upsample2x(&row, 1, 3).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
        let c = Tensor::filled(Shape::new(2, 3, 4), 2.5);
        let up = bilinear_upsample2x(&c, 6, 7).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn upsample_matches_closed_form() {
        let t = random(5, Shape::new(1, 3, 3));
        let up = bilinear_upsample2x(&t, 6, 5).unwrap();
        for oy in 0..6 {
            for ox in 0..5 {
                let sy = oy as f64 * 2.0 / 5.0;
                let sx = ox as f64 * 2.0 / 4.0;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(2));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let p = |y: usize, x: usize| t.at(0, y, x) as f64;
                let want = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                assert!((up.at(0, oy, ox) as f64 - want).abs() < 1e-6, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn upsample_rejects_bad_sizes() {
        let t = Tensor::zeros(Shape::new(1, 4, 4));
        assert!(bilinear_upsample2x(&t, 3, 8).is_err());
        assert!(bilinear_upsample2x(&t, 9, 8).is_err());
        assert!(bilinear_upsample2x(&t, 7, 8).is_ok());
    }

    #[test]
    fn backward_ops_are_adjoints() {
        // <A x, y> == <x, A^T y>
        let x = random(6, Shape::new(2, 5, 7));
        let y = random(7, Shape::new(2, 3, 4));
        let dot = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p * q) as f64)
                .sum::<f64>()
        };
        let ax = avg_downsample2x(&x).unwrap();
        let aty = avg_downsample2x_backward(x.shape(), &y).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-5);

        let ux = bilinear_upsample2x(&y, 5, 7).unwrap();
        let uty = bilinear_upsample2x_backward(y.shape(), &x).unwrap();
        assert!((dot(&ux, &x) - dot(&y, &uty)).abs() < 1e-5);
    }
}
