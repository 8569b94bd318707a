// SPDX-License-Identifier: Apache-2.0

//! Pipeline configuration file.
//!
//! A config file is TOML with optional sections `preprocess`, `clustering`,
//! `filter`, `workspace`, `chamber`, `retrieval` and `synth`, plus a
//! top-level `profile`. Missing keys fall back to the profile's defaults;
//! unknown keys are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canopy_synth::SceneSpec;
use crate::clustering::ClusteringParams;
use crate::leaf_detect::LeafFilterConfig;
use crate::preprocess::PreprocessConfig;
use crate::retrieval_sim::{ChamberSpec, RetrievalConfig, TrialConfig, WorkspaceSpec};

/// Camera-distance regime. Selects preprocessing, clustering and synthesis
/// defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Camera 0.2-0.3 m from the canopy.
    #[default]
    Indoor,
    /// Camera 0.5-1.6 m from the canopy.
    Outdoor,
}

impl Profile {
    pub fn camera_range(self) -> [f64; 2] {
        match self {
            Profile::Indoor => [0.2, 0.3],
            Profile::Outdoor => [0.5, 1.6],
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "indoor" => Ok(Profile::Indoor),
            "outdoor" => Ok(Profile::Outdoor),
            other => Err(format!("unknown profile `{other}`, expected indoor or outdoor")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub preprocess: PreprocessConfig,
    pub clustering: ClusteringParams,
    pub filter: LeafFilterConfig,
    pub workspace: WorkspaceSpec,
    pub chamber: ChamberSpec,
    pub retrieval: RetrievalConfig,
    pub synth: SceneSpec,
}

impl PipelineConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (preprocess, clustering) = match profile {
            Profile::Indoor => (PreprocessConfig::indoor(), ClusteringParams::indoor()),
            Profile::Outdoor => (PreprocessConfig::outdoor(), ClusteringParams::outdoor()),
        };
        Self {
            profile,
            preprocess,
            clustering,
            filter: LeafFilterConfig::default(),
            workspace: WorkspaceSpec::default(),
            chamber: ChamberSpec::default(),
            retrieval: RetrievalConfig::default(),
            synth: SceneSpec::for_profile(profile, 20, 0),
        }
    }

    /// Parses a config file over the defaults of its profile. A
    /// `profile_override` wins over the file's own `profile` key.
    pub fn from_toml_str(text: &str, profile_override: Option<Profile>) -> Result<Self, ConfigError> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let profile = match (profile_override, file.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| ConfigError::Parse("`profile` must be a string".into()))?
                .parse()
                .map_err(ConfigError::Parse)?,
            (None, None) => Profile::default(),
        };
        let mut merged =
            toml::Table::try_from(Self::defaults(profile)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert(
            "profile".into(),
            toml::Value::String(profile_name(profile).into()),
        );
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.preprocess.validate().map_err(|e| invalid(&e))?;
        self.clustering.validate().map_err(|e| invalid(&e))?;
        self.filter.validate().map_err(|e| invalid(&e))?;
        self.workspace.validate().map_err(|e| invalid(&e))?;
        self.chamber.validate().map_err(|e| invalid(&e))?;
        self.retrieval.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            preprocess: self.preprocess,
            clustering: self.clustering,
            filter: self.filter,
            workspace: self.workspace,
            chamber: self.chamber,
            retrieval: self.retrieval,
        }
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Indoor => "indoor",
        Profile::Outdoor => "outdoor",
    }
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
