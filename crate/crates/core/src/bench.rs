//! Inference latency measurement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PyramidNet;
use crate::parallel;
use crate::tensor::{Shape, Tensor};

/// Published per-frame latency of the original model, for context only.
pub const REFERENCE_MS: f64 = 31.0;
/// Published throughput of the original model, for context only.
pub const REFERENCE_FPS: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
    pub parallel: bool,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "{}x{} ({}): {:.2} ms/frame (p50 {:.2}, p95 {:.2}), {:.1} fps; reference {REFERENCE_MS} ms / {REFERENCE_FPS} fps on other hardware, not compared",
            self.width,
            self.height,
            if self.parallel { "parallel" } else { "serial" },
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.fps
        )
    }
}

/// Nearest-rank percentile of sorted values, `q` in `(0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time `iters` forward passes on a fixed random pair at `height x width`,
/// after `warmup` untimed ones. Only the forward call is inside the timer.
pub fn bench_inference(
    net: &PyramidNet,
    height: usize,
    width: usize,
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Config(
            "bench needs at least one timed iteration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = Shape::new(3, height, width);
    let img1 = Tensor::from_fn(shape, |_, _, _| rng.gen());
    let img2 = Tensor::from_fn(shape, |_, _, _| rng.gen());
    for _ in 0..warmup {
        net.forward_any(&img1, &img2)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let pass = net.forward_any(&img1, &img2)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        drop(pass);
    }
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        height,
        width,
        warmup,
        iters,
        parallel: parallel::enabled(),
        mean_ms,
        p50_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        fps: 1e3 / mean_ms,
    })
}
