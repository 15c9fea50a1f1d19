//! End-point-error statistics over a dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_flo, write_flo};
use crate::model::PyramidNet;
use crate::parallel;
use crate::synth::Sample;
use crate::tensor::FlowField;

/// Pixels with EPE above this many pixels count as outliers.
pub const OUTLIER_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEpe {
    pub mean: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEpe {
    pub id: String,
    pub mean: f64,
    pub pixels: usize,
    pub outliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    pub mean: f64,
    pub median: f64,
    pub outlier_fraction: f64,
    /// Keyed by frame-1 segment id; `-1` is the background.
    pub per_segment: BTreeMap<i32, GroupEpe>,
    pub sample_count: usize,
    pub pixel_count: usize,
    pub per_sample: Vec<SampleEpe>,
}

impl EpeReport {
    /// Flat per-sample table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mean_epe,valid_pixels,outliers\n");
        for s in &self.per_sample {
            writeln!(out, "{},{},{},{}", s.id, s.mean, s.pixels, s.outliers)
                .expect("writing to a String");
        }
        out
    }
}

/// Where predictions come from.
#[derive(Debug, Clone, Copy)]
pub enum Predictions<'a> {
    Net(&'a PyramidNet),
    /// One `<id>.flo` per sample.
    FloDir(&'a Path),
    /// The identically zero flow.
    Zero,
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.flo"))
}

/// Write `net`'s prediction for every sample as `<id>.flo` under `dir`.
pub fn write_predictions(net: &PyramidNet, samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in parallel::map(samples, |s| -> Result<()> {
        let flow = net.predict(&s.image1, &s.image2)?;
        write_flo(&flow, prediction_path(dir, &s.id))
    }) {
        r?;
    }
    Ok(())
}

fn predict(source: Predictions, s: &Sample) -> Result<FlowField> {
    let (h, w) = s.gt_flow.shape().spatial();
    let flow = match source {
        Predictions::Net(net) => net.predict(&s.image1, &s.image2)?,
        Predictions::Zero => FlowField::zeros(h, w),
        Predictions::FloDir(dir) => {
            let path = prediction_path(dir, &s.id);
            if !path.is_file() {
                return Err(Error::MissingPrediction(path));
            }
            read_flo(path)?
        }
    };
    let found = flow.shape().spatial();
    if found != (h, w) {
        return Err(Error::ResolutionMismatch {
            expected: (h, w),
            found,
        });
    }
    Ok(flow)
}

/// Valid pixels of one sample: `(epe, segment id)`.
fn pixel_errors(pred: &FlowField, s: &Sample) -> Vec<(f64, i32)> {
    let gt = &s.gt_flow;
    (0..s.valid_mask.data().len())
        .filter(|&p| s.valid_mask.data()[p] > 0.5)
        .map(|p| {
            let du = (pred.u()[p] - gt.u()[p]) as f64;
            let dv = (pred.v()[p] - gt.v()[p]) as f64;
            ((du * du + dv * dv).sqrt(), s.segment_map.ids[p])
        })
        .collect()
}

/// EPE statistics over the valid pixels of `samples`. Means and the median
/// pool pixels across samples.
pub fn evaluate(source: Predictions, samples: &[Sample]) -> Result<EpeReport> {
    if samples.is_empty() {
        return Err(Error::Dataset(
            "evaluation needs at least one sample".into(),
        ));
    }
    let errors = parallel::map(samples, |s| predict(source, s).map(|f| pixel_errors(&f, s)));
    let mut all = Vec::new();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut segments: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    let (mut sum, mut outliers) = (0.0f64, 0usize);
    for (s, e) in samples.iter().zip(errors) {
        let e = e?;
        let mut s_sum = 0.0f64;
        let mut s_out = 0;
        for &(epe, seg) in &e {
            s_sum += epe;
            let entry = segments.entry(seg).or_insert((0.0, 0));
            entry.0 += epe;
            entry.1 += 1;
            if epe > OUTLIER_THRESHOLD {
                s_out += 1;
            }
            all.push(epe);
        }
        sum += s_sum;
        outliers += s_out;
        per_sample.push(SampleEpe {
            id: s.id.clone(),
            mean: if e.is_empty() {
                0.0
            } else {
                s_sum / e.len() as f64
            },
            pixels: e.len(),
            outliers: s_out,
        });
    }
    let n = all.len();
    if n == 0 {
        return Err(Error::Dataset("no valid pixels in the dataset".into()));
    }
    all.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        all[n / 2]
    } else {
        (all[n / 2 - 1] + all[n / 2]) / 2.0
    };
    Ok(EpeReport {
        mean: sum / n as f64,
        median,
        outlier_fraction: outliers as f64 / n as f64,
        per_segment: segments
            .into_iter()
            .map(|(k, (s, c))| {
                (
                    k,
                    GroupEpe {
                        mean: s / c as f64,
                        pixels: c,
                    },
                )
            })
            .collect(),
        sample_count: samples.len(),
        pixel_count: n,
        per_sample,
    })
}

/// Error of predicting no motion.
pub fn zero_flow_baseline(samples: &[Sample]) -> Result<EpeReport> {
    evaluate(Predictions::Zero, samples)
}
