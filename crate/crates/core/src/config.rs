//! JSON run configuration.
//!
//! ```json
//! {
//!   "encoder": { "layers": 4, "embed_dim": 32, "image_side": 12, "patch_side": 4 },
//!   "train": { "mode": "duallora", "rank": 4, "lr": 0.005 },
//!   "dataset": { "synthetic": { "tasks": 5, "classes_per_task": 2, ... } },
//!   "out_dir": "runs/a",
//!   "strict_paper": false
//! }
//! ```
//!
//! Unknown keys are rejected at every level. Omitted `train` fields take
//! their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_tasks, split_dataset, Fixture, LabelledImages, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::trainer::CLConfig;
use crate::vit::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDatasetSpec {
    pub path: PathBuf,
    pub tasks: usize,
    pub classes_per_task: usize,
    #[serde(default)]
    pub pretext_classes: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticTaskSpec),
    File(FileDatasetSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: CLConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub strict_paper: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if 2 * self.train.rank > self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "rank {} exceeds embed_dim / 2",
                self.train.rank
            )));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.image_side != self.encoder.image_side || s.channels != self.encoder.channels {
                return Err(Error::Config("dataset and encoder image shapes differ".into()));
            }
        }
        Ok(())
    }

    /// Builds the task sequence; synthetic data is drawn from the run seed.
    pub fn fixture(&self) -> Result<Fixture> {
        let seed = self.train.seed;
        let fx = match &self.dataset {
            DatasetSpec::Synthetic(s) => generate_tasks(s, seed)?,
            DatasetSpec::File(f) => {
                let raw = LabelledImages::load(&f.path)?;
                split_dataset(&raw, f.pretext_classes, f.classes_per_task, f.tasks, f.test_fraction, seed)?
            }
        };
        if fx.image_side != self.encoder.image_side || fx.channels != self.encoder.channels {
            return Err(Error::Config("dataset and encoder image shapes differ".into()));
        }
        Ok(fx)
    }

    /// The standard five-task synthetic fixture with `s/σ = 10` and class
    /// centres pulled toward a per-task anchor.
    pub fn standard() -> Self {
        Self {
            encoder: EncoderConfig {
                layers: 4,
                embed_dim: 32,
                image_side: 12,
                patch_side: 4,
                channels: 1,
                ffn_ratio: 4,
            },
            train: CLConfig { lr: 5e-3, rank: 4, samples: 60, ..CLConfig::default() },
            dataset: DatasetSpec::Synthetic(SyntheticTaskSpec {
                tasks: 5,
                classes_per_task: 2,
                train_per_class: 40,
                test_per_class: 20,
                image_side: 12,
                channels: 1,
                separation: 10.0,
                noise: 1.0,
                pretext_classes: 10,
                pretext_per_class: 30,
                task_anchor_weight: 0.3,
            }),
            out_dir: None,
            strict_paper: false,
        }
    }
}
