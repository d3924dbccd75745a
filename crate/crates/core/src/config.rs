//! Run configuration, read from a TOML file.
//!
//! ```toml
//! seed = 0
//! epochs = 10
//! mode = "full_scheduler"
//! architecture = "desk_cnn.arch"
//! epsilon_target = 12.0
//!
//! [data]
//! source = "synthetic"
//!
//! [dpsgd]
//! logical_batch = 256
//! physical_batch = 128
//!
//! [scheduler]
//! fraction = 0.5
//! ```
//!
//! Unknown keys anywhere are rejected. Relative paths are resolved against
//! the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::optim::{DpSgdConfig, UpdateRule};
use crate::quant::QuantizerSpec;
use crate::scheduler::{Mode, SchedulerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub n_classes: usize,
    /// Synthetic only.
    pub n_per_class: usize,
    /// Synthetic only, e.g. `"1x8x8"`.
    pub shape: String,
    /// Synthetic only.
    pub separation: f64,
    /// Seeds dataset generation and the validation split; independent of the run seed.
    pub seed: u64,
    /// Validation share, held out before training.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            images: None,
            labels: None,
            n_classes: 10,
            n_per_class: 1000,
            shape: "1x8x8".into(),
            separation: 3.0,
            seed: 0,
            holdout: 0.1,
        }
    }
}

impl DataConfig {
    pub fn example_shape(&self) -> Result<Vec<usize>> {
        self.shape
            .split('x')
            .map(|d| match d.trim().parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(Error::Config(format!("bad data shape `{}`", self.shape))),
            })
            .collect()
    }
}

/// Inputs to the cost model. Times are in arbitrary units; percentages are
/// relative to `t_train`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedupConfig {
    pub t_train: f64,
    pub overhead_percent: f64,
    pub analysis_percent: f64,
    /// Quantized compute share; derived from the architecture and `k` when absent.
    pub p: Option<f64>,
    pub speedup_factor: f64,
}

impl Default for SpeedupConfig {
    fn default() -> Self {
        Self {
            t_train: 100.0,
            overhead_percent: 6.0,
            analysis_percent: 10.0,
            p: None,
            speedup_factor: 4.0,
        }
    }
}

fn default_epochs() -> usize {
    10
}

fn default_mode() -> Mode {
    Mode::FullScheduler
}

fn default_optimizer() -> UpdateRule {
    UpdateRule::DpSgd
}

fn default_epsilon() -> f64 {
    12.0
}

fn default_delta() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_optimizer")]
    pub optimizer: UpdateRule,
    /// Path to an architecture description.
    pub architecture: PathBuf,
    #[serde(default = "default_epsilon")]
    pub epsilon_target: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Keep per-step gradient/noise statistics.
    #[serde(default)]
    pub step_stats: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub dpsgd: DpSgdConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub quantizer: QuantizerSpec,
    #[serde(default)]
    pub speedup: SpeedupConfig,
}

impl RunConfig {
    /// Parses `text`, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.architecture);
        if let Some(p) = cfg.data.images.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.labels.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.epsilon_target > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_target must be > 0, got {}",
                self.epsilon_target
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.data.holdout > 0.0 && self.data.holdout < 1.0) {
            return Err(Error::Config(format!("holdout {} outside (0, 1)", self.data.holdout)));
        }
        if self.quantizer.sign_bits != 1 || !(1..=6).contains(&self.quantizer.exponent_bits) {
            return Err(Error::Config(format!(
                "unsupported quantizer layout {}s{}e",
                self.quantizer.sign_bits, self.quantizer.exponent_bits
            )));
        }
        self.dpsgd.validate()?;
        self.scheduler.validate()?;
        if !self.architecture.is_file() {
            return Err(Error::Config(format!(
                "architecture file {} not found",
                self.architecture.display()
            )));
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.data.example_shape()?;
                if self.data.n_per_class == 0 || self.data.n_classes < 2 {
                    return Err(Error::Config("synthetic data needs >= 2 classes and >= 1 example each".into()));
                }
            }
            DataSource::Idx => {
                for (name, p) in [("images", &self.data.images), ("labels", &self.data.labels)] {
                    match p {
                        Some(p) if p.is_file() => {}
                        Some(p) => {
                            return Err(Error::Config(format!("{name} file {} not found", p.display())))
                        }
                        None => return Err(Error::Config(format!("idx data needs `{name}`"))),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn architecture_text(&self) -> Result<String> {
        std::fs::read_to_string(&self.architecture).map_err(|e| Error::io(&self.architecture, e))
    }
}
