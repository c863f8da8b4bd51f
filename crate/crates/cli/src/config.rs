//! Experiment configuration file.
//!
//! ```toml
//! [paths]
//! dataset = "data/ESC-50"
//! store = "work/features"
//! out = "work/run1"
//!
//! [prepare]
//! subset = "esc10"
//!
//! [model]
//! attention_site = "l10"
//!
//! [train]
//! epochs = 300
//!
//! [augment]
//! copies_per_clip = 2
//! ```
//!
//! Relative paths resolve against the directory holding the file. Every
//! section is optional; missing keys take their defaults.

use std::path::{Path, PathBuf};

use acrnn_core::augment::AugmentPlan;
use acrnn_core::model::AcrnnConfig;
use acrnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Esc50,
    Esc10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub sample_rate_hz: u32,
    pub subset: Subset,
    pub augment: bool,
    pub jobs: Option<usize>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            sample_rate_hz: 44_100,
            subset: Subset::Esc50,
            augment: false,
            jobs: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub prepare: PrepareConfig,
    pub model: AcrnnConfig,
    pub train: TrainConfig,
    pub augment: AugmentPlan,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            msg: e.to_string().trim_end().to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.store,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Path {
            path: path.to_path_buf(),
            msg: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    /// Applies a command-line seed to every randomized stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.augment.seed = seed;
    }

    pub fn validate(&self) -> acrnn_core::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}
