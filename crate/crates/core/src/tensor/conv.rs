//! Stride-1 "same" convolution with zero padding.
//!
//! The spatial domain is processed in tiles of whole rows. For each tile the
//! receptive fields are unrolled into a `[cin * k * k, tile_pixels]` column
//! buffer that stays cache resident, and the products go through `sgemm`.
//! Tiles write disjoint output pixels, so running them in parallel yields the
//! same bits as running them in sequence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Target number of pixels per column tile.
const TILE_PIXELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

/// Weights are laid out `[out_channels, in_channels, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    /// A layer with all weights and biases zero.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(
                "conv layer needs at least one input and output channel".into(),
            ));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            activation,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.fan_in() + 1)
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, dy: usize, dx: usize) -> f32 {
        self.weights[((o * self.in_channels + c) * self.kernel + dy) * self.kernel + dx]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.weights.len() != self.out_channels * self.fan_in()
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Config(format!(
                "conv layer {}->{} k={} has {} weights and {} biases",
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        self.validate()?;
        if input.channels() != self.in_channels {
            return Err(Error::Config(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    tile_rows: usize,
}

impl Geometry {
    fn new(cin: usize, height: usize, width: usize, kernel: usize) -> Self {
        Geometry {
            cin,
            height,
            width,
            kernel,
            pad: kernel / 2,
            tile_rows: (TILE_PIXELS / width).clamp(1, height),
        }
    }

    fn depth(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .step_by(self.tile_rows)
            .map(move |r0| (r0, self.tile_rows.min(self.height - r0)))
    }
}

/// Unroll rows `row0..row0 + rows` into `cols[(c*k + dy)*k + dx][p]`.
fn fill_cols(input: &[f32], g: &Geometry, row0: usize, rows: usize, cols: &mut [f32]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad);
    let tp = rows * w;
    for c in 0..g.cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let base = ((c * k + dy) * k + dx) * tp;
                let dst = &mut cols[base..base + tp];
                // Valid output x range for this horizontal offset.
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad).saturating_sub(dx).min(w);
                for r in 0..rows {
                    let row = &mut dst[r * w..(r + 1) * w];
                    let ys = (row0 + r + dy) as isize - pad as isize;
                    if ys < 0 || ys >= h as isize || x_lo >= x_hi {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ys as usize * w..(ys as usize + 1) * w];
                    row[..x_lo].fill(0.0);
                    row[x_hi..].fill(0.0);
                    let xs0 = x_lo + dx - pad;
                    row[x_lo..x_hi].copy_from_slice(&src[xs0..xs0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Scatter-add `cols` back into the input gradient (adjoint of `fill_cols`).
fn scatter_cols(cols: &[f32], g: &Geometry, row0: usize, rows: usize, grad: &mut [f32]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad);
    let tp = rows * w;
    for c in 0..g.cin {
        let plane = &mut grad[c * h * w..(c + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let base = ((c * k + dy) * k + dx) * tp;
                let src = &cols[base..base + tp];
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad).saturating_sub(dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for r in 0..rows {
                    let ys = (row0 + r + dy) as isize - pad as isize;
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    let xs0 = x_lo + dx - pad;
                    let dst =
                        &mut plane[ys as usize * w + xs0..ys as usize * w + xs0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[r * w + x_lo..r * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Forward pass over one tile; writes the tile's pixels of every output plane.
///
/// # Safety
/// `out` must point to a `[cout, H, W]` buffer, and no other thread may touch
/// this tile's pixel range while the call runs.
unsafe fn forward_tile(
    input: &[f32],
    layer: &ConvLayer,
    g: &Geometry,
    row0: usize,
    rows: usize,
    cols: &mut Vec<f32>,
    out: *mut f32,
) {
    let hw = g.height * g.width;
    let tp = rows * g.width;
    let depth = g.depth();
    cols.resize(depth * tp, 0.0);
    fill_cols(input, g, row0, rows, cols);
    let p0 = row0 * g.width;
    let tile_plane = |o: usize| std::slice::from_raw_parts_mut(out.add(o * hw + p0), tp);
    for o in 0..layer.out_channels {
        tile_plane(o).fill(layer.bias[o]);
    }
    // out^T[p][o] += cols^T[p][kidx] * W^T[kidx][o]
    matrixmultiply::sgemm(
        tp,
        depth,
        layer.out_channels,
        1.0,
        cols.as_ptr(),
        1,
        tp as isize,
        layer.weights.as_ptr(),
        1,
        depth as isize,
        1.0,
        out.add(p0),
        1,
        hw as isize,
    );
    if layer.activation == Activation::Relu {
        for o in 0..layer.out_channels {
            for v in tile_plane(o) {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

struct OutPtr(*mut f32);
unsafe impl Send for OutPtr {}
unsafe impl Sync for OutPtr {}

impl OutPtr {
    fn get(&self) -> *mut f32 {
        self.0
    }
}

/// `output[o,y,x] = bias[o] + sum_{c,dy,dx} w[o,c,dy,dx] * input_padded[c, y+dy, x+dx]`,
/// followed by the layer's activation.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    layer.check_input(input)?;
    let (h, w) = input.shape().spatial();
    let g = Geometry::new(layer.in_channels, h, w, layer.kernel);
    let mut out = Tensor::zeros(Shape::new(layer.out_channels, h, w));
    let tiles: Vec<(usize, usize)> = g.tiles().collect();
    if parallel::enabled() && tiles.len() > 1 {
        let ptr = OutPtr(out.data_mut().as_mut_ptr());
        tiles
            .par_iter()
            .for_each_init(Vec::new, |cols, &(r0, rows)| {
                // SAFETY: tiles cover disjoint pixel ranges of every plane.
                unsafe { forward_tile(input.data(), layer, &g, r0, rows, cols, ptr.get()) };
            });
    } else {
        let mut cols = Vec::new();
        let ptr = out.data_mut().as_mut_ptr();
        for (r0, rows) in tiles {
            // SAFETY: single-threaded; `ptr` covers the whole output.
            unsafe { forward_tile(input.data(), layer, &g, r0, rows, &mut cols, ptr) };
        }
    }
    Ok(out)
}

/// Gradients of `conv2d`; recomputes the forward output to gate the activation.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let output = conv2d(input, layer)?;
    let grads = conv2d_backward_with_output(input, layer, &output, grad_out, true)?;
    Ok((
        grads.input.expect("input gradient requested"),
        grads.weights,
        grads.bias,
    ))
}

/// Gradients of `conv2d` given the forward `output` (post-activation).
///
/// For ReLU the gate is `output > 0`, which equals `pre-activation > 0`; the
/// derivative at exactly zero is zero.
pub fn conv2d_backward_with_output(
    input: &Tensor,
    layer: &ConvLayer,
    output: &Tensor,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<ConvGrads> {
    layer.check_input(input)?;
    let (h, w) = input.shape().spatial();
    let expected = Shape::new(layer.out_channels, h, w);
    if grad_out.shape() != expected || output.shape() != expected {
        return Err(Error::Config(format!(
            "conv backward: expected gradient shape {expected}, got {} (output {})",
            grad_out.shape(),
            output.shape()
        )));
    }
    let g = Geometry::new(layer.in_channels, h, w, layer.kernel);
    let hw = h * w;
    let depth = g.depth();
    let cout = layer.out_channels;

    let gated;
    let grad_pre: &[f32] = match layer.activation {
        Activation::None => grad_out.data(),
        Activation::Relu => {
            gated = grad_out
                .data()
                .iter()
                .zip(output.data())
                .map(|(&gr, &y)| if y > 0.0 { gr } else { 0.0 })
                .collect::<Vec<f32>>();
            &gated
        }
    };

    let bias: Vec<f32> = (0..cout)
        .map(|o| grad_pre[o * hw..(o + 1) * hw].iter().sum())
        .collect();
    let mut weights = vec![0.0f32; cout * depth];
    let mut grad_in = want_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = Vec::new();
    let mut gcols = Vec::new();

    for (r0, rows) in g.tiles() {
        let tp = rows * w;
        let p0 = r0 * w;
        cols.resize(depth * tp, 0.0);
        fill_cols(input.data(), &g, r0, rows, &mut cols);
        // dW[o][kidx] += sum_p grad_pre[o][p] * cols[kidx][p]
        unsafe {
            matrixmultiply::sgemm(
                cout,
                tp,
                depth,
                1.0,
                grad_pre.as_ptr().add(p0),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                tp as isize,
                1.0,
                weights.as_mut_ptr(),
                depth as isize,
                1,
            );
        }
        if let Some(gi) = grad_in.as_mut() {
            gcols.resize(depth * tp, 0.0);
            // dcols[kidx][p] = sum_o W[o][kidx] * grad_pre[o][p]
            unsafe {
                matrixmultiply::sgemm(
                    depth,
                    cout,
                    tp,
                    1.0,
                    layer.weights.as_ptr(),
                    1,
                    depth as isize,
                    grad_pre.as_ptr().add(p0),
                    hw as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    tp as isize,
                    1,
                );
            }
            scatter_cols(&gcols, &g, r0, rows, gi.data_mut());
        }
    }

    Ok(ConvGrads {
        input: grad_in,
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_layer(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        act: Activation,
    ) -> ConvLayer {
        let mut l = ConvLayer::zeros(cin, cout, k, act).unwrap();
        l.weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-1.0..1.0));
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-1.0..1.0));
        l
    }

    /// Quadruple loop over (o, y, x) and (c, dy, dx), accumulated in f64.
    fn naive_conv(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let (h, w) = input.shape().spatial();
        let pad = (layer.kernel / 2) as isize;
        Tensor::from_fn(Shape::new(layer.out_channels, h, w), |o, y, x| {
            let mut acc = layer.bias[o] as f64;
            for c in 0..layer.in_channels {
                for dy in 0..layer.kernel {
                    for dx in 0..layer.kernel {
                        let ys = y as isize + dy as isize - pad;
                        let xs = x as isize + dx as isize - pad;
                        if ys >= 0 && ys < h as isize && xs >= 0 && xs < w as isize {
                            acc += layer.weight(o, c, dy, dx) as f64
                                * input.at(c, ys as usize, xs as usize) as f64;
                        }
                    }
                }
            }
            match layer.activation {
                Activation::Relu => acc.max(0.0) as f32,
                Activation::None => acc as f32,
            }
        })
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, Shape::new(1, 5, 7));
        let mut layer = ConvLayer::zeros(1, 1, 1, Activation::None).unwrap();
        layer.weights[0] = 1.0;
        assert_eq!(conv2d(&input, &layer).unwrap(), input);
    }

    #[test]
    fn zero_input_gives_bias_map() {
        let mut layer = ConvLayer::zeros(2, 3, 3, Activation::None).unwrap();
        layer.bias = vec![0.5, -1.25, 2.0];
        layer.weights.iter_mut().for_each(|w| *w = 0.3);
        let out = conv2d(&Tensor::zeros(Shape::new(2, 4, 4)), &layer).unwrap();
        for o in 0..3 {
            assert!(out.plane(o).iter().all(|&v| v == layer.bias[o]));
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, Shape::new(3, 6, 6));
        let layer = random_layer(&mut rng, 3, 3, 3, Activation::None);
        let got = conv2d(&input, &layer).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&input, &layer)) < 1e-5);
    }

    #[test]
    fn matches_direct_summation_across_tiles() {
        // 40 columns -> 3 rows per tile, with a partial last tile.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random_tensor(&mut rng, Shape::new(4, 11, 40));
        let layer = random_layer(&mut rng, 4, 5, 7, Activation::Relu);
        let got = conv2d(&input, &layer).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&input, &layer)) < 1e-4);
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_tensor(&mut rng, Shape::new(2, 2, 3));
        let layer = random_layer(&mut rng, 2, 2, 7, Activation::None);
        let got = conv2d(&input, &layer).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&input, &layer)) < 1e-5);
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernel() {
        assert!(matches!(
            ConvLayer::zeros(1, 1, 2, Activation::None),
            Err(Error::Config(_))
        ));
        let layer = ConvLayer::zeros(3, 1, 3, Activation::None).unwrap();
        assert!(matches!(
            conv2d(&Tensor::zeros(Shape::new(2, 4, 4)), &layer),
            Err(Error::Config(_))
        ));
        let bad = Tensor::zeros(Shape::new(2, 4, 4));
        let input = Tensor::zeros(Shape::new(3, 4, 4));
        assert!(conv2d_backward(&input, &layer, &bad).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let l = ConvLayer::zeros(2, 3, 3, Activation::Relu).unwrap();
        assert_eq!(l.param_count(), 57);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, Shape::new(2, 5, 5));
        let layer = random_layer(&mut rng, 2, 3, 3, Activation::Relu);
        let (gi, gw, gb) =
            conv2d_backward(&input, &layer, &Tensor::zeros(Shape::new(3, 5, 5))).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_product_gradient() {
        let input = Tensor::filled(Shape::new(1, 1, 1), 0.75);
        let mut layer = ConvLayer::zeros(1, 1, 1, Activation::None).unwrap();
        layer.weights[0] = -2.0;
        let (gi, gw, gb) =
            conv2d_backward(&input, &layer, &Tensor::filled(Shape::new(1, 1, 1), 1.0)).unwrap();
        assert_eq!(gw, vec![0.75]);
        assert_eq!(gb, vec![1.0]);
        assert_eq!(gi.data(), &[-2.0]);
    }

    #[test]
    fn relu_gate_is_zero_at_zero() {
        // Bias 0 and zero input: pre-activation is exactly 0 everywhere.
        let layer = ConvLayer::zeros(1, 1, 3, Activation::Relu).unwrap();
        let input = Tensor::zeros(Shape::new(1, 3, 3));
        let (_, gw, gb) =
            conv2d_backward(&input, &layer, &Tensor::filled(Shape::new(1, 3, 3), 1.0)).unwrap();
        assert_eq!(gb, vec![0.0]);
        assert!(gw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_in_input_without_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, Shape::new(3, 6, 5));
        let y = random_tensor(&mut rng, Shape::new(3, 6, 5));
        let layer = random_layer(&mut rng, 3, 2, 3, Activation::None);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Tensor::from_fn(x.shape(), |c, i, j| a * x.at(c, i, j) + b * y.at(c, i, j));
        let lhs = conv2d(&mix, &layer).unwrap();
        let cx = conv2d(&x, &layer).unwrap();
        let cy = conv2d(&y, &layer).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |o, i, j| {
            a * cx.at(o, i, j) + b * cy.at(o, i, j) - (a + b - 1.0) * layer.bias[o]
        });
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn parallel_tiles_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_tensor(&mut rng, Shape::new(8, 32, 32));
        let layer = random_layer(&mut rng, 8, 16, 7, Activation::Relu);
        let serial = conv2d(&input, &layer).unwrap();
        let par = parallel::with_enabled(true, || conv2d(&input, &layer).unwrap());
        assert_eq!(serial, par);
    }
}
