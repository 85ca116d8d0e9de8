use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cf::{CfConfig, CfKind};
use crate::data::{SyntheticConfig, DEFAULT_HISTORY_LEN, DEFAULT_RATING_THRESHOLD, DEFAULT_WARM_THRESHOLD};
use crate::error::{CoraError, Result};
use crate::generator::GeneratorConfig;
use crate::lm::{LmConfig, LmTrainConfig};
use crate::train_eval::TrainConfig;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const TITLES_FILE: &str = "titles.tsv";

/// Where the dataset lives and how it is split and prompted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `interactions.tsv` and `titles.tsv`.
    pub dir: Option<PathBuf>,
    pub rating_threshold: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub warm_threshold: usize,
    pub history_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            rating_threshold: DEFAULT_RATING_THRESHOLD,
            valid_frac: 0.2,
            test_frac: 0.2,
            warm_threshold: DEFAULT_WARM_THRESHOLD,
            history_len: DEFAULT_HISTORY_LEN,
        }
    }
}

/// Every knob of the pipeline. Unknown keys are rejected; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub cf: CfConfig,
    /// `vocab_size` is replaced by the size of the built vocabulary.
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    /// Seeds CF, language-model and generator initialisation and batch order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            cf: CfConfig::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Small configuration that trains the whole pipeline on the 64x64
    /// synthetic dataset in well under a minute per model.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            data: DataConfig {
                warm_threshold: 4,
                ..base.data
            },
            cf: CfConfig {
                kind: CfKind::Mf,
                dim: 8,
                neg_ratio: 0,
                ..base.cf
            },
            lm: LmConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 2,
                d_ff: 64,
                max_len: 160,
                ..base.lm
            },
            lm_train: LmTrainConfig {
                epochs: 10,
                ..base.lm_train
            },
            generator: GeneratorConfig {
                k: 4,
                n_blocks: 2,
                d_c: 8,
                heads: 2,
                rank: 4,
                ..base.generator
            },
            train: TrainConfig {
                lr: 3e-3,
                weight_decay: 1e-3,
                ..base.train
            },
            ..base
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoraError::MissingArtifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Copies the master seed into every stage and checks cross-stage widths.
    pub fn resolved(mut self) -> Result<Self> {
        self.cf.seed = self.seed;
        self.lm_train.seed = self.seed;
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        if self.generator.d_c != self.cf.dim {
            return Err(CoraError::config(format!(
                "generator expects {}-wide embeddings but CF produces {}",
                self.generator.d_c, self.cf.dim
            )));
        }
        self.generator.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}
