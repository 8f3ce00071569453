//! Run configuration: one TOML document uniting training hyperparameters
//! with corpus paths, style selection, and output location. Every field has
//! a default and can be overridden by a command-line flag; the fully
//! resolved document is written next to a run's outputs so the run can be
//! reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::vgg::{FeatureExtractorHandle, WeightsSource};

/// Environment variable consulted for extractor weights when neither a flag
/// nor the config file names a weights file.
pub const EXTRACTOR_WEIGHTS_ENV: &str = "SCGAN_EXTRACTOR_WEIGHTS";

/// File name the resolved configuration is written under.
pub const RESOLVED_CONFIG_NAME: &str = "run-config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root directory holding the corpus (`trainA`/`trainB` subdirectories).
    pub data_root: PathBuf,
    /// Corpus selector: a subdirectory of `data_root` holding one cartoon
    /// style's corpus; empty uses `data_root` directly.
    pub style: String,
    /// Output directory for checkpoints, logs, images, and reports.
    pub out: PathBuf,
    /// Optional region-annotation sidecar for the selfie domain.
    pub annotations: Option<PathBuf>,
    /// Training hyperparameters, including the extractor handle.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            style: String::new(),
            out: PathBuf::from("out"),
            annotations: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Effective corpus root: `data_root/style`, or `data_root` when no
    /// style is selected.
    pub fn corpus_root(&self) -> PathBuf {
        if self.style.is_empty() {
            self.data_root.clone()
        } else {
            self.data_root.join(&self.style)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// The document with all defaults applied.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved document into `dir` (created if needed) and return
    /// its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Resolve the extractor weights source. Precedence: an explicit flag, then
/// whatever the config file names, then the environment fallback (which only
/// fills in when the config leaves the extractor at identity).
pub fn resolve_weights(
    flag: Option<PathBuf>,
    configured: &WeightsSource,
    env: Option<PathBuf>,
) -> WeightsSource {
    if let Some(path) = flag {
        return WeightsSource::File(path);
    }
    match (configured, env) {
        (WeightsSource::Identity, Some(path)) => WeightsSource::File(path),
        (source, _) => source.clone(),
    }
}

/// Apply the resolved weights source, keeping the configured tap layer.
pub fn apply_weights(config: &mut RunConfig, source: WeightsSource) {
    config.train.extractor =
        FeatureExtractorHandle::new(config.train.extractor.layer_id.clone(), source);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::AblationPreset;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
        // Unset options are omitted rather than serialized as nulls.
        assert!(!text.contains("annotations"));
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let text = r#"
            style = "anime"
            [train]
            seed = 7
            ablation_preset = "B"
        "#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.style, "anime");
        assert_eq!(config.train.seed, 7);
        assert_eq!(config.train.ablation_preset, AblationPreset::B);
        assert_eq!(config.train.total_steps, TrainConfig::default().total_steps);
        assert_eq!(config.corpus_root(), Path::new("data").join("anime"));
        assert_eq!(RunConfig::default().corpus_root(), Path::new("data"));
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("steps = 3\n").unwrap_err();
        assert!(err.to_string().contains("steps"));
    }

    #[test]
    fn weight_resolution_prefers_flag_then_config_then_env() {
        let flag = Some(PathBuf::from("flag.bin"));
        let env = Some(PathBuf::from("env.bin"));
        let configured = WeightsSource::File(PathBuf::from("config.bin"));

        assert_eq!(
            resolve_weights(flag.clone(), &configured, env.clone()),
            WeightsSource::File(PathBuf::from("flag.bin"))
        );
        assert_eq!(
            resolve_weights(None, &configured, env.clone()),
            configured
        );
        assert_eq!(
            resolve_weights(None, &WeightsSource::Identity, env),
            WeightsSource::File(PathBuf::from("env.bin"))
        );
        assert_eq!(
            resolve_weights(None, &WeightsSource::Identity, None),
            WeightsSource::Identity
        );
    }

    #[test]
    fn applying_weights_keeps_the_tap_layer() {
        let mut config = RunConfig::default();
        apply_weights(&mut config, WeightsSource::File(PathBuf::from("w.bin")));
        assert_eq!(config.train.extractor.layer_id, "conv4_4");
        assert_eq!(
            config.train.extractor.weights_source,
            WeightsSource::File(PathBuf::from("w.bin"))
        );
    }

    #[test]
    fn resolved_config_is_written_alongside_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut config = RunConfig {
            annotations: Some(PathBuf::from("faces.jsonl")),
            ..RunConfig::default()
        };
        config.train.total_steps = 3;
        let path = config.write_resolved(&out).unwrap();
        assert_eq!(path, out.join(RESOLVED_CONFIG_NAME));
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, config);
    }
}
