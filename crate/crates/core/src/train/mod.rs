//! Supervised training of [`PyramidNet`] on synthetic pairs.
//!
//! Sequential mode trains one level at a time from the coarsest, each against
//! its own downsampled target while the other levels stay frozen. End-to-end
//! mode supervises only the finest output and updates every level.

mod adam;
mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::model::{
    checkpoint_size_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
pub use adam::{adam_step, AdamParams, AdamState};
pub use loss::{epe_loss, flow_pyramid_targets, mask_pyramid, EPE_EPS};

use crate::error::{Error, Result};
use crate::model::{
    input_pyramid, level_input, predictor_backward, predictor_forward, LayerGrad, PyramidNet,
};
use crate::parallel;
use crate::synth::Sample;
use crate::tensor::{bilinear_upsample2x, FlowField, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "sequential")]
    Sequential,
    #[serde(rename = "end-to-end")]
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs per level in sequential mode, total epochs in end-to-end mode.
    pub epochs_per_level: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub epe_eps: f64,
    pub seed: u64,
    /// Fraction of samples used for training; the rest is validation.
    pub split: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_level: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epe_eps: EPE_EPS,
            seed: 0,
            split: 0.9,
            mode: TrainMode::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("adam betas must be in (0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.epe_eps > 0.0) {
            return bad("adam_eps and epe_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Level trained in this epoch (0 in end-to-end mode).
    pub level: usize,
    /// 1-based epoch within the level.
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    /// Validation EPE at `level`, in that level's pixels.
    pub val_epe: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Finest-level validation EPE before and after training.
    pub initial_val_epe: f64,
    pub final_val_epe: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        match self.epochs.last() {
            Some(r) => CheckpointMeta {
                epoch: r.epoch as u32,
                level: r.level as u32,
                train_loss: r.train_loss as f32,
                val_epe: self.final_val_epe as f32,
            },
            None => CheckpointMeta {
                val_epe: self.final_val_epe as f32,
                ..CheckpointMeta::default()
            },
        }
    }

    /// Fraction of epochs (after the first of each level) whose validation
    /// EPE improved on the previous epoch of the same level.
    pub fn improving_fraction(&self) -> f64 {
        let pairs: Vec<bool> = self
            .epochs
            .windows(2)
            .filter(|w| w[0].level == w[1].level)
            .map(|w| w[1].val_epe < w[0].val_epe)
            .collect();
        if pairs.is_empty() {
            return 1.0;
        }
        pairs.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64
    }
}

/// Pooled masked EPE: `(sum of per-pixel EPE, pixel count)`.
fn epe_sum(pred: &FlowField, gt: &FlowField, mask: &Tensor) -> (f64, usize) {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for p in 0..mask.data().len() {
        if mask.data()[p] > 0.5 {
            let du = (pred.u()[p] - gt.u()[p]) as f64;
            let dv = (pred.v()[p] - gt.v()[p]) as f64;
            sum += (du * du + dv * dv).sqrt();
            n += 1;
        }
    }
    (sum, n)
}

fn pooled(parts: &[(f64, usize)]) -> Result<f64> {
    let (sum, n) = parts
        .iter()
        .fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    if n == 0 {
        return Err(Error::Dataset("validation set has no valid pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Finest-level EPE of the full network, pooled over the samples' valid pixels.
pub fn validation_epe(net: &PyramidNet, samples: &[&Sample]) -> Result<f64> {
    let parts = parallel::map(samples, |s| -> Result<(f64, usize)> {
        let flow = net.predict(&s.image1, &s.image2)?;
        Ok(epe_sum(&flow, &s.gt_flow, &s.valid_mask))
    });
    pooled(&parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Everything a single level needs, with coarser levels already evaluated.
struct LevelData {
    input: Tensor,
    flow_up: FlowField,
    target: FlowField,
    mask: Tensor,
}

fn prepare_level(net: &PyramidNet, s: &Sample, level: usize) -> Result<LevelData> {
    let k = net.num_levels();
    let p1 = input_pyramid(&s.image1, k)?;
    let p2 = input_pyramid(&s.image2, k)?;
    let mut coarse: Option<FlowField> = None;
    for j in (level..k).rev() {
        let (h, w) = p1[j].shape().spatial();
        let flow_up = match &coarse {
            Some(c) => FlowField::new(bilinear_upsample2x(c, h, w)?.scale(2.0))?,
            None => FlowField::zeros(h, w),
        };
        let input = level_input(&p1[j], &p2[j], &flow_up)?;
        if j == level {
            return Ok(LevelData {
                input,
                flow_up,
                target: flow_pyramid_targets(&s.gt_flow, k)?.swap_remove(level),
                mask: mask_pyramid(&s.valid_mask, k)?.swap_remove(level),
            });
        }
        let acts = predictor_forward(&net.levels[j], &input)?;
        coarse = Some(FlowField::new(flow_up.add(acts.last().unwrap())?)?);
    }
    unreachable!("level {level} is below the pyramid depth {k}")
}

fn level_flow(net: &PyramidNet, level: usize, d: &LevelData) -> Result<(Vec<Tensor>, FlowField)> {
    let acts = predictor_forward(&net.levels[level], &d.input)?;
    let flow = FlowField::new(d.flow_up.add(acts.last().unwrap())?)?;
    Ok((acts, flow))
}

/// Adam state for every layer of the levels being trained.
struct Optimizer {
    hp: AdamParams,
    t: u64,
    /// Per level, per layer: (weights, bias).
    states: Vec<Option<Vec<(AdamState, AdamState)>>>,
}

impl Optimizer {
    fn new(net: &PyramidNet, levels: &[usize], hp: AdamParams) -> Self {
        let mut states = vec![None; net.num_levels()];
        for &l in levels {
            states[l] = Some(
                net.levels[l]
                    .iter()
                    .map(|layer| {
                        (
                            AdamState::new(layer.weights.len()),
                            AdamState::new(layer.bias.len()),
                        )
                    })
                    .collect(),
            );
        }
        Optimizer { hp, t: 0, states }
    }

    fn step(&mut self, net: &mut PyramidNet, grads: &[Option<Vec<LayerGrad>>]) -> Result<()> {
        self.t += 1;
        for (l, state) in self.states.iter_mut().enumerate() {
            let (Some(state), Some(g)) = (state, &grads[l]) else {
                continue;
            };
            for ((layer, (sw, sb)), lg) in net.levels[l].iter_mut().zip(state).zip(g) {
                adam_step(&mut layer.weights, &lg.weights, sw, self.t, &self.hp)?;
                adam_step(&mut layer.bias, &lg.bias, sb, self.t, &self.hp)?;
            }
        }
        Ok(())
    }
}

/// Sum per-sample gradients in order, scaled by `scale`.
fn accumulate(total: &mut Option<Vec<LayerGrad>>, g: Vec<LayerGrad>, scale: f32) {
    match total {
        None => {
            *total = Some(
                g.into_iter()
                    .map(|lg| LayerGrad {
                        weights: lg.weights.iter().map(|v| v * scale).collect(),
                        bias: lg.bias.iter().map(|v| v * scale).collect(),
                    })
                    .collect(),
            )
        }
        Some(acc) => {
            for (a, lg) in acc.iter_mut().zip(g) {
                a.weights
                    .iter_mut()
                    .zip(&lg.weights)
                    .for_each(|(x, y)| *x += y * scale);
                a.bias
                    .iter_mut()
                    .zip(&lg.bias)
                    .for_each(|(x, y)| *x += y * scale);
            }
        }
    }
}

fn check_finite(net: &PyramidNet, loss: f64) -> Result<()> {
    if !loss.is_finite() || !net.is_finite() {
        return Err(Error::Numeric(format!("training diverged (loss {loss})")));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub net: PyramidNet,
    pub history: TrainHistory,
}

/// [`train_with`] without an observer.
pub fn train(net: PyramidNet, samples: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, samples, config, |_, _| {})
}

/// Train `net` on `samples`. `observer` sees every epoch record together
/// with the network as it stands after that epoch.
///
/// The result depends only on the inputs: the split and the per-epoch
/// shuffles come from `config.seed`, and per-sample gradients are summed in
/// a fixed order whether or not parallelism is on.
pub fn train_with(
    mut net: PyramidNet,
    samples: &[Sample],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &PyramidNet),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let expected = (net.config.height, net.config.width);
    for s in samples {
        let found = s.image1.shape().spatial();
        if found != expected {
            return Err(Error::ResolutionMismatch { expected, found });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((samples.len() as f64 * config.split).round() as usize)
        .clamp(1, samples.len().saturating_sub(1).max(1));
    let mut train_idx = order[..n_train].to_vec();
    let val_idx = if n_train < samples.len() {
        order[n_train..].to_vec()
    } else {
        train_idx.clone()
    };
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let initial_val_epe = validation_epe(&net, &val)?;
    log::info!(
        "{} training / {} validation samples, initial val EPE {initial_val_epe:.4}",
        train_idx.len(),
        val.len()
    );
    let mut epochs = Vec::new();
    let hp = config.adam();

    match config.mode {
        TrainMode::Sequential => {
            for level in (0..net.num_levels()).rev() {
                if config.epochs_per_level == 0 {
                    break;
                }
                let ids: Vec<usize> = (0..samples.len()).collect();
                let frozen = &net;
                let by_id: Vec<LevelData> =
                    parallel::map(&ids, |&i| prepare_level(frozen, &samples[i], level))
                        .into_iter()
                        .collect::<Result<_>>()?;
                let mut opt = Optimizer::new(&net, &[level], hp);
                for epoch in 1..=config.epochs_per_level {
                    let start = Instant::now();
                    train_idx.shuffle(&mut rng);
                    let mut loss_sum = 0.0;
                    for batch in train_idx.chunks(config.batch_size) {
                        let results = parallel::map(batch, |&i| -> Result<(f64, Vec<LayerGrad>)> {
                            let d = &by_id[i];
                            let (acts, flow) = level_flow(&net, level, d)?;
                            let (loss, g) = epe_loss(&flow, &d.target, &d.mask, config.epe_eps)?;
                            let (grads, _) =
                                predictor_backward(&net.levels[level], &d.input, &acts, &g, false)?;
                            Ok((loss, grads))
                        });
                        let mut total = None;
                        let scale = 1.0 / batch.len() as f32;
                        for r in results {
                            let (loss, g) = r?;
                            loss_sum += loss;
                            accumulate(&mut total, g, scale);
                        }
                        let mut grads = vec![None; net.num_levels()];
                        grads[level] = total;
                        opt.step(&mut net, &grads)?;
                    }
                    let train_loss = loss_sum / train_idx.len() as f64;
                    check_finite(&net, train_loss)?;
                    let parts = parallel::map(&val_idx, |&i| -> Result<(f64, usize)> {
                        let d = &by_id[i];
                        let (_, flow) = level_flow(&net, level, d)?;
                        Ok(epe_sum(&flow, &d.target, &d.mask))
                    });
                    let val_epe = pooled(&parts.into_iter().collect::<Result<Vec<_>>>()?)?;
                    let record = EpochRecord {
                        level,
                        epoch,
                        train_loss,
                        val_epe,
                        wall_ms: start.elapsed().as_millis() as u64,
                    };
                    log::info!("level {level} epoch {epoch}: train loss {train_loss:.4}, val EPE {val_epe:.4}");
                    observer(&record, &net);
                    epochs.push(record);
                }
            }
        }
        TrainMode::EndToEnd => {
            let all: Vec<usize> = (0..net.num_levels()).collect();
            let mut opt = Optimizer::new(&net, &all, hp);
            let k = net.num_levels();
            for epoch in 1..=config.epochs_per_level {
                let start = Instant::now();
                train_idx.shuffle(&mut rng);
                let mut loss_sum = 0.0;
                for batch in train_idx.chunks(config.batch_size) {
                    let results =
                        parallel::map(batch, |&i| -> Result<(f64, Vec<Option<Vec<LayerGrad>>>)> {
                            let s = &samples[i];
                            let pass = net.forward(&s.image1, &s.image2)?;
                            let (loss, g) = epe_loss(
                                &pass.flows[0],
                                &s.gt_flow,
                                &s.valid_mask,
                                config.epe_eps,
                            )?;
                            let mut fg = vec![None; k];
                            fg[0] = Some(g);
                            Ok((loss, net.backward(&pass, &fg)?))
                        });
                    let mut totals: Vec<Option<Vec<LayerGrad>>> = vec![None; k];
                    let scale = 1.0 / batch.len() as f32;
                    for r in results {
                        let (loss, g) = r?;
                        loss_sum += loss;
                        for (t, lg) in totals.iter_mut().zip(g) {
                            if let Some(lg) = lg {
                                accumulate(t, lg, scale);
                            }
                        }
                    }
                    opt.step(&mut net, &totals)?;
                }
                let train_loss = loss_sum / train_idx.len() as f64;
                check_finite(&net, train_loss)?;
                let val_epe = validation_epe(&net, &val)?;
                let record = EpochRecord {
                    level: 0,
                    epoch,
                    train_loss,
                    val_epe,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                log::info!("epoch {epoch}: train loss {train_loss:.4}, val EPE {val_epe:.4}");
                observer(&record, &net);
                epochs.push(record);
            }
        }
    }

    let final_val_epe = validation_epe(&net, &val)?;
    log::info!("final val EPE {final_val_epe:.4}");
    Ok(TrainOutcome {
        net,
        history: TrainHistory {
            initial_val_epe,
            final_val_epe,
            epochs,
        },
    })
}
