//! Experiment configuration: architecture, training plan, data source and decoding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ArchitectureConfig;
use crate::data::{load_records, synth_toy_dataset, ColumnLayout, ProteinRecord, ToyRule, ValidationSize};
use crate::decode::{DEFAULT_BEAM, DEFAULT_BLEND};
use crate::error::{Error, Result};
use crate::optim::TrainPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Array files; relative paths resolve against the data directory.
    Files {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        layout: ColumnLayout,
        #[serde(default)]
        validation: ValidationSize,
        #[serde(default)]
        cache_dir: Option<PathBuf>,
    },
    Toy {
        rule: ToyRule,
        n_proteins: usize,
        length: usize,
        #[serde(default = "toy_validation")]
        validation: ValidationSize,
    },
}

fn toy_validation() -> ValidationSize {
    ValidationSize::Fraction(0.25)
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Files {
            train: PathBuf::from("cullpdb+profile_6133_filtered.npy.gz"),
            test: Some(PathBuf::from("cb513+profile_split1.npy.gz")),
            layout: ColumnLayout::default(),
            validation: ValidationSize::default(),
            cache_dir: None,
        }
    }
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

impl DataSource {
    pub fn validation(&self) -> ValidationSize {
        match self {
            DataSource::Files { validation, .. } | DataSource::Toy { validation, .. } => *validation,
        }
    }

    /// Training-corpus records (before the validation split).
    pub fn load_train(&self, data_dir: &Path, seed: u64) -> Result<Vec<ProteinRecord>> {
        match self {
            DataSource::Files {
                train, layout, cache_dir, ..
            } => load_records(
                &resolve(data_dir, train),
                layout,
                cache_dir.as_ref().map(|c| resolve(data_dir, c)).as_deref(),
            ),
            DataSource::Toy {
                rule,
                n_proteins,
                length,
                ..
            } => Ok(synth_toy_dataset(seed, *n_proteins, *length, *rule)),
        }
    }

    /// Held-out test records, if the source has any.
    pub fn load_test(&self, data_dir: &Path, seed: u64) -> Result<Option<Vec<ProteinRecord>>> {
        match self {
            DataSource::Files {
                test: Some(test),
                layout,
                cache_dir,
                ..
            } => load_records(
                &resolve(data_dir, test),
                layout,
                cache_dir.as_ref().map(|c| resolve(data_dir, c)).as_deref(),
            )
            .map(Some),
            DataSource::Files { test: None, .. } => Ok(None),
            DataSource::Toy {
                rule,
                n_proteins,
                length,
                ..
            } => Ok(Some(synth_toy_dataset(seed ^ 0x7E57, (*n_proteins / 4).max(1), *length, *rule))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub beam: usize,
    /// Weight on the conditional model's log-probabilities.
    pub blend: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam: DEFAULT_BEAM,
            blend: DEFAULT_BLEND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureConfig,
    pub train: TrainPlan,
    pub data: DataSource,
    /// Seeds initialization, the split, batch sampling and dropout.
    pub seed: u64,
    pub deterministic: bool,
    pub decode: DecodeSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: ArchitectureConfig::final_model(),
            train: TrainPlan::default(),
            data: DataSource::default(),
            seed: 0,
            deterministic: false,
            decode: DecodeSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.train.validate()?;
        if self.decode.beam == 0 {
            return Err(Error::config("decode.beam must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.decode.blend) {
            return Err(Error::config(format!("decode.blend {} must lie in [0, 1]", self.decode.blend)));
        }
        if let DataSource::Toy { n_proteins, length, .. } = self.data {
            if n_proteins < 2 || length == 0 {
                return Err(Error::config("toy data needs at least 2 proteins of positive length"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Training plan with the experiment seed applied.
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
