//! One configuration file for every command, TOML or JSON by extension.
//! Every section and field is optional; flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use longiseg_core::preprocess::{AffineBackend, ExternalBackend, IdentityBackend, RegistrationBackend};
use longiseg_core::synth::SynthConfig;
use longiseg_model::BackboneConfig;
use longiseg_train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `fc-densenet56`, `desk` or `tiny`.
    pub preset: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "fc-densenet56".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Output grid of preprocessing.
    pub shape: [usize; 3],
    /// `identity`, `affine` or `external:<program>`.
    pub backend: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            shape: longiseg_core::preprocess::DEFAULT_SHAPE,
            backend: "affine".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub data_dir: PathBuf,
    pub port: u16,
    pub edit_cap: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("sessions"),
            port: 8080,
            edit_cap: longiseg_core::editsim::DEFAULT_EDIT_CAP,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string())),
            Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
            _ => Err(bad("config files must end in .toml or .json".into())),
        }
    }

    /// One seed for every random source.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
            self.model.seed = s;
        }
        self
    }

    /// Field-level checks of every section.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{name}: {e}"));
        self.synth.validate().map_err(|e| field("synth", &e))?;
        self.train.validate().map_err(|e| field("train", &e))?;
        self.backbone().map_err(|e| field("model.preset", &e))?;
        self.backend().map_err(|e| field("data.backend", &e))?;
        if self.data.shape.contains(&0) {
            return Err(field("data.shape", &"extents must be positive"));
        }
        if self.service.edit_cap == 0 {
            return Err(field("service.edit_cap", &"must be at least 1"));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneConfig, CliError> {
        BackboneConfig::preset(&self.model.preset, self.model.seed).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn backend(&self) -> Result<Box<dyn RegistrationBackend>, CliError> {
        parse_backend(&self.data.backend)
    }
}

pub fn parse_backend(name: &str) -> Result<Box<dyn RegistrationBackend>, CliError> {
    match name {
        "identity" => Ok(Box::new(IdentityBackend)),
        "affine" => Ok(Box::new(AffineBackend)),
        other => match other.strip_prefix("external:") {
            Some(program) if !program.is_empty() => Ok(Box::new(ExternalBackend {
                program: program.to_string(),
            })),
            _ => Err(CliError::Config(format!(
                "unknown registration backend `{other}` (identity, affine, external:<program>)"
            ))),
        },
    }
}
