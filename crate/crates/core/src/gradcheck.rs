//! Finite-difference checks of the hand-written backward passes.
//!
//! Each check draws a small random instance, projects the operation's output
//! onto a random direction `r` (so the scalar is `sum(r * out)`, accumulated in
//! f64), and compares the analytic gradient with central differences.
//! Entries whose finite difference is below 1e-6 in magnitude are skipped.
//!
//! Instances are drawn so that no gradient entry is a near-cancelling sum:
//! projection directions are positive, conv operands are positive, warped
//! images increase along both axes. Otherwise entries of size 1e-5..1e-3
//! survive the mask while f32 rounding in the forward pass puts ~1e-5 of
//! noise on their finite differences. Instances are also kept away from
//! kinks (ReLU at zero, bilinear cell edges).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{PredictorSpec, PyramidConfig, PyramidNet};
use crate::tensor::{
    avg_downsample2x, avg_downsample2x_backward, bilinear_upsample2x, bilinear_upsample2x_backward,
    conv2d, conv2d_backward, warp, warp_backward, Activation, ConvLayer, FlowField, Shape, Tensor,
};
use crate::train::{epe_loss, EPE_EPS};

/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;
/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-2;
/// Entries whose finite-difference magnitude is below this are skipped.
pub const MASK_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Operation and argument, e.g. `"warp/flow"`.
    pub name: String,
    pub instance: usize,
    pub max_rel_err: f64,
    /// Entries compared after masking.
    pub compared: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_rel_err < REL_TOL
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn dot(a: &Tensor, r: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(r.data())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &[f32], f: impl Fn(&[f32]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (plus, minus) = (x[i] + FD_STEP, x[i] - FD_STEP);
            work[i] = plus;
            let fp = f(&work);
            work[i] = minus;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (plus as f64 - minus as f64)
        })
        .collect()
}

/// Largest relative error `|a - n| / |n|` over entries with `|n| >= MASK_BELOW`.
pub fn compare(analytic: &[f32], numeric: &[f64]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if n.abs() < MASK_BELOW {
            continue;
        }
        worst = worst.max((a as f64 - n).abs() / n.abs());
        compared += 1;
    }
    (worst, compared)
}

fn record(name: &str, instance: usize, analytic: &[f32], numeric: &[f64]) -> GradCheck {
    let (max_rel_err, compared) = compare(analytic, numeric);
    GradCheck {
        name: name.to_string(),
        instance,
        max_rel_err,
        compared,
    }
}

fn with_data(t: &Tensor, data: &[f32]) -> Tensor {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same length")
}

/// conv2d with respect to input, weights and bias.
pub fn check_conv2d(seed: u64, instance: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let act = if rng.gen_bool(0.5) {
            Activation::Relu
        } else {
            Activation::None
        };
        let mut layer = ConvLayer::zeros(cin, cout, kernel, act)?;
        layer
            .weights
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(0.1..1.0));
        // Negative biases switch some ReLU outputs off.
        let reach = 0.3 * layer.fan_in() as f32;
        layer
            .bias
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-reach..0.5));
        let x = random_tensor(&mut rng, Shape::new(cin, h, w), 0.1, 1.0);
        let r = random_tensor(&mut rng, Shape::new(cout, h, w), 0.5, 1.0);
        if act == Activation::Relu {
            let linear = ConvLayer {
                activation: Activation::None,
                ..layer.clone()
            };
            let z = conv2d(&x, &linear)?;
            let active = z.data().iter().filter(|&&v| v > 0.0).count();
            if z.data().iter().any(|v| v.abs() < 0.05) || 2 * active < z.data().len() {
                continue;
            }
        }
        let (gx, gw, gb) = conv2d_backward(&x, &layer, &r)?;
        let nx = numeric_gradient(x.data(), |d| {
            dot(&conv2d(&with_data(&x, d), &layer).unwrap(), &r)
        });
        let nw = numeric_gradient(&layer.weights, |d| {
            let l = ConvLayer {
                weights: d.to_vec(),
                ..layer.clone()
            };
            dot(&conv2d(&x, &l).unwrap(), &r)
        });
        let nb = numeric_gradient(&layer.bias, |d| {
            let l = ConvLayer {
                bias: d.to_vec(),
                ..layer.clone()
            };
            dot(&conv2d(&x, &l).unwrap(), &r)
        });
        return Ok(vec![
            record("conv2d/input", instance, gx.data(), &nx),
            record("conv2d/weights", instance, &gw, &nw),
            record("conv2d/bias", instance, &gb, &nb),
        ]);
    }
}

/// warp with respect to the image and the flow.
pub fn check_warp(seed: u64, instance: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (
        rng.gen_range(1..=3),
        rng.gen_range(3..=6),
        rng.gen_range(3..=6),
    );
    let slopes: Vec<(f32, f32)> = (0..c)
        .map(|_| (rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)))
        .collect();
    let image = Tensor::from_fn(Shape::new(c, h, w), |ch, y, x| {
        slopes[ch].0 * x as f32 + slopes[ch].1 * y as f32 + rng.gen_range(0.0..0.04)
    });
    // Every sample position has a fractional part in [0.2, 0.8].
    let flow = FlowField::new(Tensor::from_fn(Shape::new(2, h, w), |_, _, _| {
        rng.gen_range(-3i32..=2) as f32 + rng.gen_range(0.2..0.8)
    }))?;
    let r = random_tensor(&mut rng, image.shape(), 0.5, 1.0);
    let g = warp_backward(&image, &flow, &r)?;
    let ni = numeric_gradient(image.data(), |d| {
        dot(&warp(&with_data(&image, d), &flow).unwrap(), &r)
    });
    let nf = numeric_gradient(flow.data(), |d| {
        let f = FlowField::new(with_data(&flow, d)).unwrap();
        dot(&warp(&image, &f).unwrap(), &r)
    });
    Ok(vec![
        record("warp/image", instance, g.image.data(), &ni),
        record("warp/flow", instance, g.flow.data(), &nf),
    ])
}

pub fn check_upsample(seed: u64, instance: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (
        rng.gen_range(1..=3),
        rng.gen_range(2..=5),
        rng.gen_range(2..=5),
    );
    let (oh, ow) = (2 * h - rng.gen_range(0..=1), 2 * w - rng.gen_range(0..=1));
    let x = random_tensor(&mut rng, Shape::new(c, h, w), -1.0, 1.0);
    let r = random_tensor(&mut rng, Shape::new(c, oh, ow), 0.5, 1.0);
    let g = bilinear_upsample2x_backward(x.shape(), &r)?;
    let n = numeric_gradient(x.data(), |d| {
        dot(&bilinear_upsample2x(&with_data(&x, d), oh, ow).unwrap(), &r)
    });
    Ok(vec![record("bilinear_upsample2x", instance, g.data(), &n)])
}

pub fn check_downsample(seed: u64, instance: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (
        rng.gen_range(1..=3),
        rng.gen_range(2..=7),
        rng.gen_range(2..=7),
    );
    let x = random_tensor(&mut rng, Shape::new(c, h, w), -1.0, 1.0);
    let out = avg_downsample2x(&x)?;
    let r = random_tensor(&mut rng, out.shape(), 0.5, 1.0);
    let g = avg_downsample2x_backward(x.shape(), &r)?;
    let n = numeric_gradient(x.data(), |d| {
        dot(&avg_downsample2x(&with_data(&x, d)).unwrap(), &r)
    });
    Ok(vec![record("avg_downsample2x", instance, g.data(), &n)])
}

pub fn check_epe_loss(seed: u64, instance: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let gt = FlowField::new(random_tensor(&mut rng, Shape::new(2, h, w), -3.0, 3.0))?;
    let mut pred = FlowField::new(random_tensor(&mut rng, Shape::new(2, h, w), -3.0, 3.0))?;
    // Keep both error components away from zero.
    for c in 0..2 {
        for p in 0..h * w {
            if (pred.plane(c)[p] - gt.plane(c)[p]).abs() < 0.1 {
                pred.tensor_mut().plane_mut(c)[p] += 0.5;
            }
        }
    }
    let mut mask = Tensor::from_fn(Shape::new(1, h, w), |_, _, _| {
        if rng.gen_bool(0.7) {
            1.0
        } else {
            0.0
        }
    });
    mask.data_mut()[0] = 1.0;
    let (_, g) = epe_loss(&pred, &gt, &mask, EPE_EPS)?;
    let n = numeric_gradient(pred.data(), |d| {
        let p = FlowField::new(with_data(&pred, d)).unwrap();
        epe_loss(&p, &gt, &mask, EPE_EPS).unwrap().0
    });
    Ok(vec![record("epe_loss", instance, g.data(), &n)])
}

/// Whole-network check: finest-level EPE loss with respect to up to
/// `max_weights` weights spread over every level of a 2-level net.
///
/// Weights, biases and images are positive, so every ReLU stays open by a
/// margin and weight gradients do not cancel; the target sits at a fixed
/// offset from the prediction, which makes the loss gradient coherent.
pub fn check_pyramid(seed: u64, instance: usize, max_weights: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PyramidNet::init(PyramidConfig {
        levels: 2,
        height: 12,
        width: 12,
        predictor: PredictorSpec {
            channels: vec![8, 4, 2],
            kernel: 3,
        },
        per_level: None,
        seed,
    })?;
    for layer in net.levels.iter_mut().flatten() {
        let bound = 2.0 / layer.fan_in() as f32;
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(0.0..bound));
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(0.05..0.15));
    }
    // Smooth images keep the slope jumps of bilinear warping small.
    let smooth = |rng: &mut ChaCha8Rng| {
        let (a, b, c): (f32, f32, f32) = (
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.0..6.0),
        );
        Tensor::from_fn(Shape::new(3, 12, 12), |ch, y, x| {
            0.8 + 0.15 * (a * x as f32 + b * y as f32 + c + ch as f32).sin()
        })
    };
    let img1 = smooth(&mut rng);
    let img2 = smooth(&mut rng);
    let base = net.predict(&img1, &img2)?;
    let gt = FlowField::new(Tensor::from_fn(base.shape(), |c, y, x| {
        base.at(c, y, x) + [0.4, 0.3][c] + rng.gen_range(-0.05..0.05)
    }))?;
    let mask = Tensor::filled(Shape::new(1, 12, 12), 1.0);
    let loss_of = |n: &PyramidNet| -> f64 {
        let f = n.predict(&img1, &img2).unwrap();
        epe_loss(&f, &gt, &mask, EPE_EPS).unwrap().0
    };
    let pass = net.forward(&img1, &img2)?;
    let (_, g) = epe_loss(&pass.flows[0], &gt, &mask, EPE_EPS)?;
    let grads = net.backward(&pass, &[Some(g), None])?;

    let mut out = Vec::new();
    for level in 0..2 {
        let lg = grads[level]
            .as_ref()
            .expect("every level receives a gradient");
        for (li, layer) in net.levels[level].iter().enumerate() {
            let budget = (max_weights / 4).min(layer.weights.len());
            let picks: Vec<usize> = (0..budget)
                .map(|_| rng.gen_range(0..layer.weights.len()))
                .collect();
            let analytic: Vec<f32> = picks.iter().map(|&i| lg[li].weights[i]).collect();
            let numeric: Vec<f64> = picks
                .iter()
                .map(|&i| {
                    let mut probe = net.clone();
                    let w0 = layer.weights[i];
                    let (plus, minus) = (w0 + FD_STEP, w0 - FD_STEP);
                    probe.levels[level][li].weights[i] = plus;
                    let fp = loss_of(&probe);
                    probe.levels[level][li].weights[i] = minus;
                    let fm = loss_of(&probe);
                    (fp - fm) / (plus as f64 - minus as f64)
                })
                .collect();
            out.push(record(
                &format!("pyramid/level{level}/layer{li}"),
                instance,
                &analytic,
                &numeric,
            ));
        }
    }
    Ok(out)
}

/// Every per-operation check on `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let checks: [fn(u64, usize) -> Result<Vec<GradCheck>>; 5] = [
        check_conv2d,
        check_warp,
        check_upsample,
        check_downsample,
        check_epe_loss,
    ];
    let mut out = Vec::new();
    for (k, check) in checks.iter().enumerate() {
        for i in 0..instances {
            out.extend(check(seed.wrapping_add((k * 1000 + i) as u64), i)?);
        }
    }
    Ok(out)
}
