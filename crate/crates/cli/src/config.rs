use std::path::Path;

use pyraflow_core::model::PyramidConfig;
use pyraflow_core::synth::GenConfig;
use pyraflow_core::train::TrainConfig;
use pyraflow_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also report the zero-flow baseline on the same data.
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { baseline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Benchmark resolution; the checkpoint's own resolution when unset.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub warmup: usize,
    pub iters: usize,
    /// Time a parallel run in addition to the serial one.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: None,
            width: None,
            warmup: 5,
            iters: 50,
            parallel: false,
        }
    }
}

/// The whole configuration document. Every section and field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub gen: GenConfig,
    pub model: PyramidConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: CliConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.bench.iters == 0 {
            return Err(Error::Config("bench.iters must be at least 1".into()));
        }
        if matches!(self.bench.height, Some(0)) || matches!(self.bench.width, Some(0)) {
            return Err(Error::Config("bench resolution must be positive".into()));
        }
        Ok(())
    }
}
