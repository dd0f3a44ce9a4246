//! Run configuration: TOML file merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtfm_core::bench::BenchSpec;
use mtfm_core::data::GeneratorConfig;
use mtfm_core::model::ModelConfig;
use mtfm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    pub precision: Precision,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: None,
            precision: Precision::F32,
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        Ok(())
    }
}
