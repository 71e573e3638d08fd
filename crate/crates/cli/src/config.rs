//! Run configuration: one TOML file, overridable from flags, echoed into the
//! run directory once resolved.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mdanet_core::attention::AttentionScale;
use mdanet_core::compression::CompressionConfig;
use mdanet_core::train::TrainConfig;
use mdanet_core::{ModelConfig, Variant, View};
use serde::{Deserialize, Serialize};

use crate::exit::Usage;

/// Network hyperparameters. The in-plane size is not configurable: it is
/// bound to the data and the view at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub attention_scale: AttentionScale,
    /// Used by the `mda` variant only.
    pub compression: CompressionConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(Variant::Plain, 1, 1);
        ModelSection {
            depth: m.depth,
            base_channels: m.base_channels,
            num_classes: m.num_classes,
            dropout_rate: m.dropout_rate,
            attention_scale: m.attention_scale,
            compression: CompressionConfig::default(),
        }
    }
}

impl ModelSection {
    /// Template for `variant`; height and width are placeholders until the
    /// data is known.
    pub fn template(&self, variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            num_classes: self.num_classes,
            dropout_rate: self.dropout_rate,
            attention_scale: self.attention_scale,
            ..ModelConfig::new(variant, 1, 1)
        };
        if cfg.compression.is_some() {
            cfg.compression = Some(self.compression);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest written by `make-phantoms` or `import`.
    pub data: PathBuf,
    /// Run directory.
    pub out: PathBuf,
    pub variant: Variant,
    pub view: View,
    pub folds: usize,
    /// Train a single fold; all folds when absent.
    pub fold: Option<usize>,
    pub seed: u64,
    pub jobs: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data/manifest.json"),
            out: PathBuf::from("runs/default"),
            variant: Variant::Mda,
            view: View::Sagittal,
            folds: 5,
            fold: None,
            seed: 0,
            jobs: 1,
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative `data` and `out` paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        cfg.out = base.join(&cfg.out);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| anyhow::Error::new(Usage(m));
        if self.folds < 2 {
            return Err(usage(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let Some(f) = self.fold {
            if f >= self.folds {
                return Err(usage(format!("fold {f} is out of range for {} folds", self.folds)));
            }
        }
        if self.jobs == 0 {
            return Err(usage("jobs must be at least 1".into()));
        }
        self.train.validate()?;
        let mut probe = self.model.template(self.variant);
        let m = probe.spatial_multiple();
        (probe.height, probe.width) = (m, m);
        probe.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
