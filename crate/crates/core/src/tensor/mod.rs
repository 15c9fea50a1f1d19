//! Dense `[channels, height, width]` f32 tensors and the hand-differentiated
//! kernels the flow network is built from.
//!
//! Every kernel comes with an explicit backward function. There is no tape:
//! callers keep whatever forward values a backward pass needs.

mod conv;
mod resample;
mod warp;

use std::fmt;
use std::ops::Deref;

pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_with_output, Activation, ConvGrads, ConvLayer,
};
pub use resample::{
    avg_downsample2x, avg_downsample2x_backward, bilinear_upsample2x, bilinear_upsample2x_backward,
};
pub use warp::{warp, warp_backward, WarpGrads};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.channels, self.height, self.width)
    }
}

/// Row-major `[C, H, W]` array of f32.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(shape: Shape) -> Result<()> {
    if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::Shape(format!(
            "all dimensions must be >= 1, got {shape}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(
            shape.channels > 0 && shape.height > 0 && shape.width > 0,
            "tensor dimensions must be >= 1, got {shape}"
        );
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    t.data[(c * shape.height + y) * shape.width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.shape.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Stack tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (h, w) = first.shape.spatial();
        let mut channels = 0;
        for p in parts {
            if p.shape.spatial() != (h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {} vs {}",
                    first.shape, p.shape
                )));
            }
            channels += p.channels();
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    /// Channels `start..end` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.channels() {
            return Err(Error::Shape(format!(
                "channel slice {start}..{end} out of range for {}",
                self.shape
            )));
        }
        let n = self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(end - start, self.height(), self.width()),
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// A two-channel displacement field: channel 0 is `u` (+x, rightward),
/// channel 1 is `v` (+y, downward), in pixels. Pixel `(x, y)` of frame 1
/// corresponds to `(x + u, y + v)` in frame 2.
#[derive(Clone, PartialEq, Debug)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.channels() != 2 {
            return Err(Error::Shape(format!(
                "flow field needs 2 channels, got {}",
                t.shape()
            )));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(Shape::new(2, height, width)))
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let mut t = Tensor::zeros(Shape::new(2, height, width));
        t.plane_mut(0).fill(u);
        t.plane_mut(1).fill(v);
        FlowField(t)
    }

    pub fn u(&self) -> &[f32] {
        self.0.plane(0)
    }

    pub fn v(&self) -> &[f32] {
        self.0.plane(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Per-pixel vector lengths, row-major.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.u()
            .iter()
            .zip(self.v())
            .map(|(u, v)| (u * u + v * v).sqrt())
            .collect()
    }
}

impl Deref for FlowField {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        &self.0
    }
}
