//! File-backed run configuration. Every section has defaults, so a config file only needs
//! the values it changes; command-line flags are applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidsynth::data::SceneConfig;
use vidsynth::inference::EvalOptions;
use vidsynth::trainer::TrainConfig;

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Base seed; sequence seeds are derived from it.
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train: 200,
            val: 50,
            scene: SceneConfig::default(),
        }
    }
}

/// Fitting of the per-class appearance mixture after multimodal training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub components: usize,
    /// Every n-th training frame is encoded.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            components: 3,
            frame_stride: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Sequence id in the dataset manifest; the first sequence when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    /// Real frames fed in before synthesis starts (at most the generator window).
    pub prime: usize,
    pub feature_seed: u64,
    /// Also assemble an mp4 when ffmpeg is on the PATH.
    pub video: bool,
    /// Require a multimodal checkpoint (appearance sampled per instance from the seed).
    pub multimodal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub options: EvalOptions,
    /// Evaluate only the first n sequences.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipulateConfig {
    /// `[from, to]` class pairs.
    pub map: Vec<[u8; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    pub observed: usize,
    pub horizon: usize,
    pub feature_seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            sequence: None,
            observed: 4,
            horizon: 8,
            feature_seed: 0,
        }
    }
}

/// Input and output locations. Flags fill these in; a resolved config carries them so the
/// run can be repeated from the file alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Name of the command this file was resolved for (informational).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Stop training after this many steps (the checkpoint can be resumed).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub features: FeatureConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub manipulate: ManipulateConfig,
    pub predict: PredictConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("config does not serialize: {e}")))
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let mut c = RunConfig::default();
        c.paths.data = Some("data/train".into());
        c.manipulate.map = vec![[1, 2], [3, 0]];
        c.eval.limit = Some(5);
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("[dataset]\ntrain = 4\n[train]\nlr = 0.001\n").unwrap();
        assert_eq!(c.dataset.train, 4);
        assert_eq!(c.dataset.val, 50);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.beta1, 0.5);
    }
}
