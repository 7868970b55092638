//! Experiment configuration files.

use std::path::{Path, PathBuf};

use glyphdiff::conditioning::TextEncoderConfig;
use glyphdiff::denoiser::{ModelConfig, UNetConfig};
use glyphdiff::eval::protocol::ProtocolKind;
use glyphdiff::eval::ClassifierConfig;
use glyphdiff::schedule::ScheduleConfig;
use glyphdiff::synthcorpus::{CorpusConfig, Pairing};
use glyphdiff::trainer::TrainConfig;
use glyphdiff::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Desk,
    Compact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Replaces the preset's U-Net description.
    #[serde(default)]
    pub unet: Option<UNetConfig>,
    /// Replaces the preset's text encoder description.
    #[serde(default)]
    pub text: Option<TextEncoderConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: ProtocolKind,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub pairing: Pairing,
    /// Cap on training records used by the text-quality protocol.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Test records per style used by the style protocol.
    #[serde(default)]
    pub per_style: Option<usize>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub corpus: CorpusConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub eval: EvalSection,
    /// Relative to the directory holding the config file.
    pub output_dir: PathBuf,
}

/// A parsed config together with where it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    /// SHA-256 of the file bytes.
    pub hash: String,
    /// `output_dir` resolved against the config location.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { "$".into() } else { path },
                e.inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&bytes)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let output_dir = base.join(&config.output_dir);
        Ok(LoadedConfig {
            config,
            path: path.to_path_buf(),
            hash: hex::encode(Sha256::digest(&bytes)),
            output_dir,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::config(
                "schema",
                format!("unsupported schema {} (expected {SCHEMA})", self.schema),
            ));
        }
        self.schedule
            .build()
            .map_err(|e| prefix_field(e, "schedule"))?;
        self.train.validate()?;
        glyphdiff::synthcorpus::roster(self.corpus.styles_per_group, self.corpus.seed)?;
        self.model_config()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        Ok(())
    }

    pub fn n_styles(&self) -> usize {
        2 * self.corpus.styles_per_group
    }

    /// Architecture for this experiment; the preset canvas must match the corpus.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let n = self.n_styles();
        let mut m = match self.model.preset {
            Preset::Full => ModelConfig::full(n),
            Preset::Desk => ModelConfig::desk(n),
            Preset::Compact => ModelConfig::compact(n),
        }?;
        if m.canvas != self.corpus.canvas {
            return Err(Error::config(
                "model.preset",
                format!(
                    "preset canvas {}x{} differs from corpus.canvas {}x{}",
                    m.canvas.width,
                    m.canvas.height,
                    self.corpus.canvas.width,
                    self.corpus.canvas.height
                ),
            ));
        }
        if let Some(u) = &self.model.unet {
            m.unet = u.clone();
        }
        if let Some(t) = self.model.text {
            m.text = t;
        }
        m.validate().map_err(|e| prefix_field(e, "model"))?;
        Ok(m)
    }
}

/// Qualify a bare field name with the section it was validated under.
fn prefix_field(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with(section) => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    }
}
