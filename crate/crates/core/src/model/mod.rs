//! Spatial-pyramid residual flow network.
//!
//! Level 0 is the finest. The coarsest level predicts flow from scratch; every
//! finer level upsamples the coarser estimate (doubling its values), warps
//! image 2 towards image 1 with it, and adds a predicted residual:
//!
//! ```text
//! flow_up_l = 2 * upsample(flow_{l+1})          (zero at the coarsest level)
//! flow_l    = flow_up_l + G_l([img1_l | warp(img2_l, flow_up_l) | flow_up_l])
//! ```

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_size_bytes, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CheckpointMeta,
};

use crate::error::{Error, Result};
use crate::tensor::{
    avg_downsample2x, bilinear_upsample2x, bilinear_upsample2x_backward, conv2d,
    conv2d_backward_with_output, warp, warp_backward, Activation, ConvLayer, FlowField, Tensor,
};

/// Channels fed to every level predictor: 3 (image 1) + 3 (warped image 2) + 2 (flow).
pub const LEVEL_INPUT_CHANNELS: usize = 8;

/// Smallest allowed side length at the coarsest level.
pub const MIN_COARSE_SIZE: usize = 4;

/// One level's predictor: channel widths from input to output, and a shared
/// odd kernel size. ReLU follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            channels: vec![8, 16, 32, 16, 8, 2],
            kernel: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    /// Predictor used at every level unless `per_level` is given.
    pub predictor: PredictorSpec,
    /// Optional per-level override, finest first; length must equal `levels`.
    pub per_level: Option<Vec<PredictorSpec>>,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: 3,
            height: 64,
            width: 64,
            predictor: PredictorSpec::default(),
            per_level: None,
            seed: 0,
        }
    }
}

/// Sizes of a ceil-halving pyramid, finest first.
pub fn level_sizes(height: usize, width: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = Vec::with_capacity(levels);
    let (mut h, mut w) = (height, width);
    for _ in 0..levels {
        sizes.push((h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    sizes
}

impl PyramidConfig {
    pub fn level_spec(&self, level: usize) -> &PredictorSpec {
        match &self.per_level {
            Some(specs) => &specs[level],
            None => &self.predictor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if let Some(specs) = &self.per_level {
            if specs.len() != self.levels {
                return Err(Error::Config(format!(
                    "per_level has {} predictors for {} levels",
                    specs.len(),
                    self.levels
                )));
            }
        }
        let (ch, cw) = *level_sizes(self.height, self.width, self.levels)
            .last()
            .unwrap();
        if ch < MIN_COARSE_SIZE || cw < MIN_COARSE_SIZE {
            return Err(Error::Config(format!(
                "{} levels at {}x{} leave a {ch}x{cw} coarsest level (minimum {MIN_COARSE_SIZE}x{MIN_COARSE_SIZE})",
                self.levels, self.height, self.width
            )));
        }
        for l in 0..self.levels {
            let spec = self.level_spec(l);
            if spec.channels.len() < 2 {
                return Err(Error::Config(format!(
                    "level {l}: predictor needs at least one layer"
                )));
            }
            if spec.channels[0] != LEVEL_INPUT_CHANNELS {
                return Err(Error::Config(format!(
                    "level {l}: first layer must take {LEVEL_INPUT_CHANNELS} channels, got {}",
                    spec.channels[0]
                )));
            }
            if *spec.channels.last().unwrap() != 2 {
                return Err(Error::Config(format!(
                    "level {l}: last layer must emit 2 channels, got {}",
                    spec.channels.last().unwrap()
                )));
            }
            if spec.channels.contains(&0) {
                return Err(Error::Config(format!("level {l}: zero-width layer")));
            }
            if spec.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "level {l}: kernel size must be odd, got {}",
                    spec.kernel
                )));
            }
        }
        Ok(())
    }
}

/// Layers of one predictor, in evaluation order.
pub type Predictor = Vec<ConvLayer>;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidNet {
    pub config: PyramidConfig,
    /// `levels[l]` is the predictor for level `l`; index 0 is the finest.
    pub levels: Vec<Predictor>,
}

/// Weight and bias gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Gradients shaped like [`PyramidNet::levels`]; `None` for levels that were
/// not asked for.
pub type Gradients = Vec<Option<Vec<LayerGrad>>>;

/// Intermediate values kept for the backward pass of one level.
#[derive(Debug, Clone)]
pub struct LevelCache {
    pub input: Tensor,
    /// Output of every layer (post-activation); the last is the residual.
    pub activations: Vec<Tensor>,
    pub flow_up: FlowField,
    pub img2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Flow estimate at every level, finest first.
    pub flows: Vec<FlowField>,
    pub caches: Vec<LevelCache>,
}

/// Image pyramid: element 0 is `image`, each next element is its 2x box
/// downsample.
pub fn build_pyramid(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let mut out = vec![image.clone()];
    for l in 1..levels {
        let prev = &out[l - 1];
        if prev.height() < 2 || prev.width() < 2 {
            return Err(Error::Config(format!(
                "{levels} levels are too many for a {}x{} image",
                image.height(),
                image.width()
            )));
        }
        out.push(avg_downsample2x(prev)?);
    }
    Ok(out)
}

/// Offset subtracted from pixel values before they enter the network.
pub const INPUT_OFFSET: f32 = 0.5;

/// Pyramid of the centered image (`v - INPUT_OFFSET`), as consumed by the
/// level predictors.
pub fn input_pyramid(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    build_pyramid(&image.map(|v| v - INPUT_OFFSET), levels)
}

/// Predictor input `[img1 (3) | warp(img2, flow_up) (3) | flow_up (2)]`.
pub fn level_input(img1: &Tensor, img2: &Tensor, flow_up: &FlowField) -> Result<Tensor> {
    if img1.channels() != 3 || img2.channels() != 3 {
        return Err(Error::Config(format!(
            "level input needs 3-channel images, got {} and {}",
            img1.shape(),
            img2.shape()
        )));
    }
    if img1.shape() != img2.shape() || img1.shape().spatial() != flow_up.shape().spatial() {
        return Err(Error::Config(format!(
            "level input size mismatch: {} / {} / {}",
            img1.shape(),
            img2.shape(),
            flow_up.shape()
        )));
    }
    let warped = warp(img2, flow_up)?;
    Tensor::concat_channels(&[img1, &warped, flow_up.tensor()])
}

/// Run a predictor, returning every layer's output.
pub fn predictor_forward(layers: &[ConvLayer], input: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts: Vec<Tensor> = Vec::with_capacity(layers.len());
    for layer in layers {
        let x = acts.last().unwrap_or(input);
        let y = conv2d(x, layer)?;
        acts.push(y);
    }
    Ok(acts)
}

/// Back-propagate `grad_residual` through a predictor. Returns per-layer
/// gradients and, if asked, the gradient with respect to `input`.
pub fn predictor_backward(
    layers: &[ConvLayer],
    input: &Tensor,
    activations: &[Tensor],
    grad_residual: &Tensor,
    want_input_grad: bool,
) -> Result<(Vec<LayerGrad>, Option<Tensor>)> {
    let mut grads = vec![None; layers.len()];
    let mut g = grad_residual.clone();
    for i in (0..layers.len()).rev() {
        let x = if i == 0 { input } else { &activations[i - 1] };
        let need = i > 0 || want_input_grad;
        let cg = conv2d_backward_with_output(x, &layers[i], &activations[i], &g, need)?;
        grads[i] = Some(LayerGrad {
            weights: cg.weights,
            bias: cg.bias,
        });
        if let Some(gi) = cg.input {
            g = gi;
        }
    }
    let input_grad = want_input_grad.then_some(g);
    Ok((grads.into_iter().map(Option::unwrap).collect(), input_grad))
}

impl PyramidNet {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
    /// drawn level by level (finest first) from `config.seed`.
    pub fn init(config: PyramidConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let spec = config.level_spec(l);
            let n = spec.channels.len() - 1;
            let mut layers = Vec::with_capacity(n);
            for i in 0..n {
                let act = if i + 1 == n {
                    Activation::None
                } else {
                    Activation::Relu
                };
                let mut layer =
                    ConvLayer::zeros(spec.channels[i], spec.channels[i + 1], spec.kernel, act)?;
                let bound = 1.0 / (layer.fan_in() as f32).sqrt();
                for w in &mut layer.weights {
                    *w = rng.gen_range(-bound..bound);
                }
                layers.push(layer);
            }
            levels.push(layers);
        }
        Ok(PyramidNet { config, levels })
    }

    /// Zero every weight and bias of one level.
    pub fn zero_level(&mut self, level: usize) {
        for layer in &mut self.levels[level] {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn check_images(&self, img1: &Tensor, img2: &Tensor) -> Result<()> {
        let expected = (self.config.height, self.config.width);
        for img in [img1, img2] {
            if img.shape().spatial() != expected {
                return Err(Error::ResolutionMismatch {
                    expected,
                    found: img.shape().spatial(),
                });
            }
        }
        Ok(())
    }

    /// Full forward pass at the configured resolution.
    pub fn forward(&self, img1: &Tensor, img2: &Tensor) -> Result<ForwardPass> {
        self.check_images(img1, img2)?;
        self.forward_any(img1, img2)
    }

    /// Forward pass at any resolution the pyramid depth allows.
    pub fn forward_any(&self, img1: &Tensor, img2: &Tensor) -> Result<ForwardPass> {
        if img1.shape() != img2.shape() {
            return Err(Error::Config(format!(
                "image sizes differ: {} vs {}",
                img1.shape(),
                img2.shape()
            )));
        }
        let k = self.num_levels();
        let p1 = input_pyramid(img1, k)?;
        let p2 = input_pyramid(img2, k)?;
        let mut flows: Vec<Option<FlowField>> = vec![None; k];
        let mut caches: Vec<Option<LevelCache>> = vec![None; k];
        for l in (0..k).rev() {
            let (h, w) = p1[l].shape().spatial();
            let flow_up = match &flows.get(l + 1) {
                Some(Some(coarse)) => {
                    FlowField::new(bilinear_upsample2x(coarse, h, w)?.scale(2.0))?
                }
                _ => FlowField::zeros(h, w),
            };
            let input = level_input(&p1[l], &p2[l], &flow_up)?;
            let activations = predictor_forward(&self.levels[l], &input)?;
            let flow = FlowField::new(flow_up.add(activations.last().unwrap())?)?;
            flows[l] = Some(flow);
            caches[l] = Some(LevelCache {
                input,
                activations,
                flow_up,
                img2: p2[l].clone(),
            });
        }
        Ok(ForwardPass {
            flows: flows.into_iter().map(Option::unwrap).collect(),
            caches: caches.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Finest-level flow only.
    pub fn predict(&self, img1: &Tensor, img2: &Tensor) -> Result<FlowField> {
        let mut pass = self.forward(img1, img2)?;
        Ok(pass.flows.swap_remove(0))
    }

    /// Back-propagate per-level flow gradients through the whole pyramid.
    ///
    /// `flow_grads[l]` is dLoss/dflow_l (or `None`). Gradients flow from each
    /// level into coarser ones through the warp, the flow passthrough channels
    /// and the residual connection.
    pub fn backward(&self, pass: &ForwardPass, flow_grads: &[Option<Tensor>]) -> Result<Gradients> {
        let k = self.num_levels();
        if flow_grads.len() != k {
            return Err(Error::Config(format!(
                "{} flow gradients for {k} levels",
                flow_grads.len()
            )));
        }
        let mut carry: Option<Tensor> = None;
        let mut out: Gradients = vec![None; k];
        for l in 0..k {
            let mut g = match (&flow_grads[l], carry.take()) {
                (Some(a), Some(b)) => a.add(&b)?,
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            if g.shape() != pass.flows[l].shape() {
                return Err(Error::Shape(format!(
                    "level {l}: flow gradient {} vs flow {}",
                    g.shape(),
                    pass.flows[l].shape()
                )));
            }
            let cache = &pass.caches[l];
            let coarser = l + 1 < k;
            let (layer_grads, input_grad) = predictor_backward(
                &self.levels[l],
                &cache.input,
                &cache.activations,
                &g,
                coarser,
            )?;
            out[l] = Some(layer_grads);
            if let Some(gi) = input_grad {
                // Residual path plus the flow passthrough channels.
                g.add_assign(&gi.slice_channels(6, 8)?)?;
                let gw = warp_backward(&cache.img2, &cache.flow_up, &gi.slice_channels(3, 6)?)?;
                g.add_assign(&gw.flow)?;
                let coarse_shape = pass.flows[l + 1].shape();
                carry = Some(bilinear_upsample2x_backward(coarse_shape, &g)?.scale(2.0));
            }
        }
        Ok(out)
    }

    pub fn count_params(&self) -> usize {
        count_params(self)
    }

    pub fn is_finite(&self) -> bool {
        self.levels
            .iter()
            .flatten()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Learnable parameters: `sum over layers of out * (in * k^2 + 1)`.
pub fn count_params(net: &PyramidNet) -> usize {
    net.levels
        .iter()
        .flatten()
        .map(ConvLayer::param_count)
        .sum()
}
