use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, ExperimentError};
use crate::train::{SearchConfig, SupervisedConfig};
use crate::vit::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Seeded oriented gratings, see [`crate::data::gen_synthetic`].
    #[default]
    Synthetic,
    /// CIFAR-10 binary batches under `path`.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    /// Directory with the CIFAR-10 `.bin` files.
    pub path: Option<PathBuf>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            train_per_class: 64,
            test_per_class: 32,
        }
    }
}

/// Everything that determines a run. Two runs from equal configs write
/// identical files.
///
/// ```toml
/// seed = 7
/// out_dir = "runs/s7"
///
/// [model]
/// num_classes = 4
///
/// [search]
/// gelu_budget = 8
/// softmax_budget = 17
/// strategy = 5
///
/// [data]
/// source = "synthetic"
/// train_per_class = 64
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Start the student from the teacher's weights; otherwise from a fresh
    /// initialization.
    pub init_from_teacher: bool,
    /// CSV with header `tag,n,reluops` merged into the builtin cost table.
    pub cost_overrides: Option<PathBuf>,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub pretrain: SupervisedConfig,
    pub data: DataSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            init_from_teacher: true,
            cost_overrides: None,
            model: ModelConfig::default(),
            search: SearchConfig::default(),
            pretrain: SupervisedConfig::default(),
            data: DataSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ExperimentError::Toml {
            path: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.search
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.pretrain.batch_size == 0 {
            return Err(ExperimentError::Config(
                "pretrain.batch_size must be positive".into(),
            ));
        }
        if self.data.train_per_class == 0 {
            return Err(ExperimentError::Config(
                "data.train_per_class must be positive".into(),
            ));
        }
        if self.data.source == DataSource::Cifar10 {
            if self.data.path.is_none() {
                return Err(ExperimentError::Config(
                    "data.path is required for cifar10".into(),
                ));
            }
            if self.model.num_classes != 10 || self.model.channels != 3 {
                return Err(ExperimentError::Config(
                    "cifar10 needs num_classes = 10 and channels = 3".into(),
                ));
            }
        }
        Ok(())
    }

    /// Total GELU and softmax switch entries of the configured model.
    pub fn switch_totals(&self) -> (usize, usize) {
        let g: usize = self.model.gelu_switch_shape().iter().product();
        let s: usize = self.model.softmax_switch_shape().iter().product();
        (g, s)
    }
}
