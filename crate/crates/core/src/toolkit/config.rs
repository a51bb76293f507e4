use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::datasets::{DatasetSpec, LabeledDataset};
use crate::attacks::{AttackConfig, Norm};
use crate::error::{Error, Result};
use crate::lotos::LotosConfig;
use crate::nets::{AdvTrainConfig, ModelSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unclipped, unregularized.
    Orig,
    /// Every layer clipped to `C`.
    Clip,
    /// Clipped and orthogonalized.
    Lotos,
    /// Clipped, with random vectors in the orthogonalization penalty.
    RandomControl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Orig => "orig",
            Method::Clip => "clip",
            Method::Lotos => "lotos",
            Method::RandomControl => "random_control",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orig" => Ok(Method::Orig),
            "clip" => Ok(Method::Clip),
            "lotos" => Ok(Method::Lotos),
            "random_control" => Ok(Method::RandomControl),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub dataset_seed: u64,
    /// Defaults to the two-conv desk CNN sized for the dataset.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    pub method: Method,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lotos: Option<LotosConfig>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub adv_train: Option<AdvTrainConfig>,
    pub seeds: Vec<u64>,
    /// Attack only the first this-many test samples.
    #[serde(default)]
    pub eval_samples: Option<usize>,
    /// Independently trained surrogates per surrogate type.
    #[serde(default = "default_surrogates")]
    pub surrogates: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_ensemble_size() -> usize {
    3
}

fn default_surrogates() -> usize {
    1
}

impl ExperimentConfig {
    /// The desk experiment: three default CNNs on 4-class length-32
    /// textures, five seeds, L2 PGD-50 with random start at `eps = 0.25`.
    /// That radius sits between the distance needed to break the weak
    /// texture bands (about 0.2) and the strong band (about 0.55).
    pub fn desk(method: Method) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSpec::desk(),
            dataset_seed: 0,
            model: None,
            ensemble_size: 3,
            method,
            train: TrainConfig {
                clip: Some(1.0),
                ..TrainConfig::default()
            },
            lotos: Some(LotosConfig::default()),
            attack: AttackConfig {
                random_start: true,
                ..AttackConfig::new(0.25, 50, Norm::L2)
            },
            adv_train: None,
            seeds: vec![0, 1, 2, 3, 4],
            eval_samples: None,
            surrogates: 1,
            output_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: v,
                    expected: u64::from(SCHEMA_VERSION),
                })
            }
            None => {
                return Err(Error::MalformedFile {
                    path: path.to_path_buf(),
                    reason: "missing schema_version".into(),
                })
            }
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: u64::from(self.schema_version),
                expected: u64::from(SCHEMA_VERSION),
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if matches!(self.method, Method::Lotos | Method::RandomControl) {
            match &self.lotos {
                Some(l) => l.validate()?,
                None => return Err(Error::Config(format!("method {} needs a lotos section", self.method.name()))),
            }
        }
        self.train.validate()?;
        self.attack.validate()?;
        if let Some(spec) = &self.model {
            spec.validate()?;
        }
        Ok(())
    }

    /// Training settings with the method's clipping rule applied.
    pub fn train_for(&self, method: Method) -> TrainConfig {
        let clip = match method {
            Method::Orig => None,
            _ => Some(self.train.clip.unwrap_or(1.0)),
        };
        TrainConfig {
            clip,
            ..self.train.clone()
        }
    }

    /// Orthogonalization settings for `method`; `lambda = 0` when it has none.
    pub fn lotos_for(&self, method: Method) -> LotosConfig {
        let base = self.lotos.clone().unwrap_or_default();
        match method {
            Method::Orig | Method::Clip => LotosConfig { lambda: 0.0, ..base },
            Method::Lotos | Method::RandomControl => base,
        }
    }

    pub fn model_spec(&self, data: &LabeledDataset) -> ModelSpec {
        self.model
            .clone()
            .unwrap_or_else(|| ModelSpec::default_cnn(data.dim(), data.classes))
    }
}
