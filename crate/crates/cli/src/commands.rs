use std::fs;
use std::path::{Path, PathBuf};

use pyraflow_core::bench::{bench_inference, BenchReport};
use pyraflow_core::eval::{evaluate, zero_flow_baseline, EpeReport, Predictions};
use pyraflow_core::io::{flow_to_color, read_flo, read_ppm, write_flo, write_ppm, MaxNorm};
use pyraflow_core::model::{
    checkpoint_size_bytes, count_params, load_checkpoint, save_checkpoint, PyramidNet,
};
use pyraflow_core::synth::{generate_dataset, load_dataset};
use pyraflow_core::train::train_with;
use pyraflow_core::{parallel, Error, Result};
use serde::Serialize;

use crate::config::CliConfig;

/// Published size of the original network, shown next to ours as context.
pub const REFERENCE_PARAMS: u64 = 4_200_000;
pub const REFERENCE_BYTES: u64 = 7_800_000;

fn emit(value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::Config(format!("serializing output: {e}")))?;
    println!("{line}");
    Ok(())
}

fn config_or_default(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        Some(p) => CliConfig::load(p),
        None => Ok(CliConfig::default()),
    }
}

#[derive(Serialize)]
struct GenOutput<'a> {
    out: &'a Path,
    samples: usize,
    seed: u64,
}

pub fn gen(config: &Path, out: &Path) -> Result<()> {
    let config = CliConfig::load(config)?;
    let manifest = generate_dataset(&config.gen, out)?;
    eprintln!(
        "wrote {} samples to {}",
        manifest.samples.len(),
        out.display()
    );
    emit(&GenOutput {
        out,
        samples: manifest.samples.len(),
        seed: manifest.seed,
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a Path,
    count_params: usize,
    checkpoint_bytes: usize,
    reference_params: u64,
    reference_bytes: u64,
    initial_val_epe: f64,
    final_val_epe: f64,
    improving_fraction: f64,
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let config = CliConfig::load(config)?;
    let dataset = load_dataset(data)?;
    let net = PyramidNet::init(config.model.clone())?;
    let params = count_params(&net);
    let predicted = checkpoint_size_bytes(&net);
    eprintln!(
        "model: {params} parameters (reference {:.1}M), checkpoint {predicted} bytes (reference {:.1} MB)",
        REFERENCE_PARAMS as f64 / 1e6,
        REFERENCE_BYTES as f64 / 1e6
    );
    let mut emit_err = None;
    let outcome = train_with(net, &dataset.samples, &config.train, |record, _| {
        if let Err(e) = emit(record) {
            emit_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = emit_err {
        return Err(e);
    }
    let written = save_checkpoint(&outcome.net, &outcome.history.checkpoint_meta(), out)?;
    let h = &outcome.history;
    eprintln!(
        "val EPE {:.4} -> {:.4}; improved in {:.0}% of epochs",
        h.initial_val_epe,
        h.final_val_epe,
        100.0 * h.improving_fraction()
    );
    emit(&TrainSummary {
        checkpoint: out,
        count_params: params,
        checkpoint_bytes: written,
        reference_params: REFERENCE_PARAMS,
        reference_bytes: REFERENCE_BYTES,
        initial_val_epe: h.initial_val_epe,
        final_val_epe: h.final_val_epe,
        improving_fraction: h.improving_fraction(),
    })
}

pub fn infer(ckpt: &Path, img1: &Path, img2: &Path, out: &Path) -> Result<()> {
    let net = load_checkpoint(ckpt)?.net;
    let flow = net.predict(&read_ppm(img1)?, &read_ppm(img2)?)?;
    if !flow.is_finite() {
        return Err(Error::Numeric(
            "prediction contains non-finite values".into(),
        ));
    }
    write_flo(&flow, out)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a EpeReport,
    zero_flow_mean: Option<f64>,
}

pub enum EvalSource {
    Checkpoint(PathBuf),
    Predictions(PathBuf),
}

pub fn eval(
    source: &EvalSource,
    data: &Path,
    csv: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let config = config_or_default(config)?;
    let dataset = load_dataset(data)?;
    let report = match source {
        EvalSource::Checkpoint(p) => {
            let net = load_checkpoint(p)?.net;
            evaluate(Predictions::Net(&net), &dataset.samples)?
        }
        EvalSource::Predictions(dir) => evaluate(Predictions::FloDir(dir), &dataset.samples)?,
    };
    if !report.mean.is_finite() {
        return Err(Error::Numeric(
            "evaluation produced a non-finite EPE".into(),
        ));
    }
    let zero_flow_mean = if config.eval.baseline {
        Some(zero_flow_baseline(&dataset.samples)?.mean)
    } else {
        None
    };
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    eprintln!(
        "mean EPE {:.4}, median {:.4}, outliers {:.2}% over {} samples",
        report.mean,
        report.median,
        100.0 * report.outlier_fraction,
        report.sample_count
    );
    emit(&EvalOutput {
        report: &report,
        zero_flow_mean,
    })
}

#[derive(Serialize)]
struct BenchOutput {
    serial: BenchReport,
    parallel: Option<BenchReport>,
}

pub fn bench(
    ckpt: &Path,
    warmup: Option<usize>,
    iters: Option<usize>,
    force_parallel: bool,
    config: Option<&Path>,
) -> Result<()> {
    let config = config_or_default(config)?.bench;
    let net = load_checkpoint(ckpt)?.net;
    let h = config.height.unwrap_or(net.config.height);
    let w = config.width.unwrap_or(net.config.width);
    let warmup = warmup.unwrap_or(config.warmup);
    let iters = iters.unwrap_or(config.iters);
    let serial = parallel::with_enabled(false, || bench_inference(&net, h, w, warmup, iters))?;
    eprintln!("{}", serial.summary());
    let par = if force_parallel || config.parallel {
        let r = parallel::with_enabled(true, || bench_inference(&net, h, w, warmup, iters))?;
        eprintln!("{}", r.summary());
        Some(r)
    } else {
        None
    };
    emit(&BenchOutput {
        serial,
        parallel: par,
    })
}

pub fn viz(flo: &Path, out: &Path, max_norm: Option<f32>) -> Result<()> {
    let flow = read_flo(flo)?;
    let norm = max_norm.map_or(MaxNorm::Auto, MaxNorm::Fixed);
    write_ppm(&flow_to_color(&flow, norm)?, out)
}
