use crate::error::{Error, Result};
use crate::tensor::{avg_downsample2x, FlowField, Shape, Tensor};

/// Default `epsilon` inside the end-point-error square root.
pub const EPE_EPS: f64 = 1e-8;

/// Masked mean of `sqrt(du^2 + dv^2 + eps)` and its gradient with respect to
/// `pred`. Pixels count when their mask value exceeds 0.5.
pub fn epe_loss(
    pred: &FlowField,
    gt: &FlowField,
    mask: &Tensor,
    eps: f64,
) -> Result<(f64, Tensor)> {
    let (h, w) = pred.shape().spatial();
    if gt.shape() != pred.shape() || mask.shape() != Shape::new(1, h, w) {
        return Err(Error::Shape(format!(
            "epe_loss: prediction {}, ground truth {}, mask {}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let n = mask.data().iter().filter(|&&m| m > 0.5).count();
    if n == 0 {
        return Err(Error::Dataset("epe_loss: mask selects no pixels".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let (gu, gv) = grad.data_mut().split_at_mut(h * w);
    let mut sum = 0.0f64;
    for p in 0..h * w {
        if mask.data()[p] <= 0.5 {
            continue;
        }
        let du = (pred.u()[p] - gt.u()[p]) as f64;
        let dv = (pred.v()[p] - gt.v()[p]) as f64;
        let r = (du * du + dv * dv + eps).sqrt();
        sum += r;
        gu[p] = (du / r * inv_n) as f32;
        gv[p] = (dv / r * inv_n) as f32;
    }
    Ok((sum * inv_n, grad))
}

/// Per-level supervision: level `l` is `gt` box-downsampled `l` times, with
/// displacements scaled by `2^-l`.
pub fn flow_pyramid_targets(gt: &FlowField, levels: usize) -> Result<Vec<FlowField>> {
    let mut out = vec![gt.clone()];
    for l in 1..levels {
        let down = avg_downsample2x(&out[l - 1])?.scale(0.5);
        out.push(FlowField::new(down)?);
    }
    Ok(out)
}

/// Validity per level: a coarse pixel is valid only if every fine pixel
/// in its block is.
pub fn mask_pyramid(mask: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let binary = mask.map(|m| if m > 0.5 { 1.0 } else { 0.0 });
    let mut out = vec![binary];
    for l in 1..levels {
        let avg = avg_downsample2x(&out[l - 1])?;
        out.push(avg.map(|m| if m >= 1.0 - 1e-6 { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(h: usize, w: usize) -> Tensor {
        Tensor::filled(Shape::new(1, h, w), 1.0)
    }

    #[test]
    fn perfect_prediction_costs_the_epsilon_floor() {
        let f = FlowField::constant(4, 5, 1.5, -2.0);
        let (loss, grad) = epe_loss(&f, &f, &ones(4, 5), EPE_EPS).unwrap();
        assert!((loss - 1e-4).abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn three_four_five() {
        let gt = FlowField::zeros(1, 1);
        let pred = FlowField::constant(1, 1, 3.0, 4.0);
        let (loss, grad) = epe_loss(&pred, &gt, &ones(1, 1), EPE_EPS).unwrap();
        assert!((loss - 5.0).abs() < 1e-6);
        assert!((grad.data()[0] - 0.6).abs() < 1e-6 && (grad.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let gt = FlowField::zeros(1, 2);
        let mut pred = FlowField::constant(1, 2, 3.0, 4.0);
        pred.tensor_mut().data_mut()[1] = 100.0;
        let mask = Tensor::from_vec(Shape::new(1, 1, 2), vec![1.0, 0.0]).unwrap();
        let (loss, grad) = epe_loss(&pred, &gt, &mask, EPE_EPS).unwrap();
        assert!((loss - 5.0).abs() < 1e-6);
        assert_eq!(grad.data()[1], 0.0);
        assert!(epe_loss(&pred, &gt, &Tensor::zeros(Shape::new(1, 1, 2)), EPE_EPS).is_err());
    }

    #[test]
    fn constant_flow_targets_halve() {
        let t = flow_pyramid_targets(&FlowField::constant(16, 16, 4.0, 2.0), 3).unwrap();
        let want = [(4.0, 2.0), (2.0, 1.0), (1.0, 0.5)];
        for (f, (u, v)) in t.iter().zip(want) {
            assert!(f.u().iter().all(|&x| x == u) && f.v().iter().all(|&x| x == v));
        }
        assert_eq!(t[2].shape(), Shape::new(2, 4, 4));
        let g = FlowField::constant(3, 3, 1.0, 1.0);
        assert_eq!(flow_pyramid_targets(&g, 1).unwrap(), vec![g]);
    }

    #[test]
    fn coarse_mask_needs_a_fully_valid_block() {
        let m = Tensor::from_vec(
            Shape::new(1, 2, 4),
            vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let p = mask_pyramid(&m, 2).unwrap();
        assert_eq!(p[1].data(), &[1.0, 0.0]);
    }
}
