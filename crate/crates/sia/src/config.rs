//! Run configuration: TOML file, named presets, command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sia_core::audio::AudioEmbedderConfig;
use sia_core::image::ImageEmbedderConfig;
use sia_core::schedule::{Schedule, ScheduleKind};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension N.
    pub n: usize,
    /// Stacked Bi-GRU layers G.
    pub gru_layers: usize,
    /// DenseNet growth rate.
    pub growth: usize,
    /// Layers per dense block.
    pub block_config: Vec<usize>,
    /// Audio front-end convolution stride.
    pub conv_stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Initial (maximum) learning rate.
    pub eta_max: f64,
    /// Learning-rate floor.
    pub eta_min: f64,
    /// Hinge margin.
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// "calr" or "calwr".
    pub schedule: String,
    pub t0: f64,
    pub mult: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub cache_root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutConfig {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub out: OutConfig,
}

pub const PRESETS: &[&str] = &[
    "DG2A1024",
    "DG3A1024",
    "DG4A1024",
    "DG2A2048",
    "DG4A2048",
    "tiny",
];

/// Model half of a named preset.
pub fn preset_model(name: &str) -> Result<ModelConfig> {
    let (n, g, growth, blocks): (usize, usize, usize, Vec<usize>) = match name {
        "DG2A1024" => (1024, 2, 32, vec![6, 12, 64, 48]),
        "DG3A1024" => (1024, 3, 32, vec![6, 12, 64, 48]),
        "DG4A1024" => (1024, 4, 32, vec![6, 12, 64, 48]),
        "DG2A2048" => (2048, 2, 32, vec![6, 12, 64, 48]),
        "DG4A2048" => (2048, 4, 32, vec![6, 12, 64, 48]),
        "tiny" => (64, 1, 4, vec![2, 2, 4, 3]),
        other => bail!("unknown preset {other}; expected one of {PRESETS:?}"),
    };
    Ok(ModelConfig {
        n,
        gru_layers: g,
        growth,
        block_config: blocks,
        conv_stride: 2,
    })
}

impl RunConfig {
    /// Defaults shared by every preset; data/out paths point into `root`.
    pub fn preset(name: &str, root: &Path) -> Result<RunConfig> {
        // The desk-scale preset learns faster with a hotter, smaller-batch
        // regime than the full-size configurations.
        let (eta_max, batch_size) = if name == "tiny" { (1e-3, 16) } else { (2e-4, 64) };
        Ok(RunConfig {
            model: preset_model(name)?,
            optim: OptimConfig {
                eta_max,
                eta_min: 0.0,
                beta: 0.2,
                batch_size,
                epochs: 30,
                schedule: "calwr".into(),
                t0: 1.0,
                mult: 2.0,
                seed: 0,
            },
            data: DataConfig {
                manifest: root.join("manifest.csv"),
                cache_root: root.join("mfcc_cache"),
            },
            out: OutConfig {
                checkpoint_dir: root.join("checkpoints"),
                log_path: root.join("train_log.csv"),
            },
        })
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn audio_config(&self) -> AudioEmbedderConfig {
        let mut cfg = AudioEmbedderConfig::new(self.model.n, self.model.gru_layers);
        cfg.conv_stride = self.model.conv_stride;
        cfg
    }

    pub fn image_config(&self) -> ImageEmbedderConfig {
        ImageEmbedderConfig::new(self.model.growth, self.model.block_config.clone(), self.model.n)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let kind = match self.optim.schedule.as_str() {
            "calr" => ScheduleKind::Calr {
                epochs: self.optim.epochs.max(1) as f64,
            },
            "calwr" => ScheduleKind::Calwr {
                t0: self.optim.t0,
                mult: self.optim.mult,
            },
            other => bail!("unknown schedule kind {other}; expected calr or calwr"),
        };
        Ok(Schedule::new(kind, self.optim.eta_min, self.optim.eta_max)?)
    }

    /// Validate everything cheap before any long-running work.
    pub fn validate(&self) -> Result<()> {
        self.audio_config().validate()?;
        self.image_config().validate()?;
        self.schedule()?;
        if !(2..=64).contains(&self.optim.batch_size) {
            bail!("batch_size must be in [2, 64], got {}", self.optim.batch_size);
        }
        if !(self.optim.beta > 0.0) {
            bail!("hinge margin must be positive, got {}", self.optim.beta);
        }
        Ok(())
    }

    /// Canonical description of everything that affects tensor shapes and
    /// preprocessing, hashed into checkpoint/cache fingerprints.
    pub fn fingerprint_input(&self) -> String {
        format!(
            "model n={} g={} growth={} blocks={:?} stride={} mfcc=400/200/128/40@16000",
            self.model.n,
            self.model.gru_layers,
            self.model.growth,
            self.model.block_config,
            self.model.conv_stride,
        )
    }
}
