//! TOML run configuration.
//!
//! Every section and field is optional; absent values take the defaults of
//! the corresponding module config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::CaptureConfig;
use crate::editor::{EditConfig, EditMode};
use crate::engine::{EngineConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::SuiteConfig;
use crate::probe::{ProbeConfig, ProbeSetup};

/// The `[edit]` table. Capture settings live in their own table and are
/// merged in by [`RunConfig::edit_config`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub tau_f: f64,
    pub tau_r: f64,
    pub mode: EditMode,
}

impl Default for EditSection {
    fn default() -> Self {
        let e = EditConfig::default();
        Self {
            tau_f: e.tau_f,
            tau_r: e.tau_r,
            mode: e.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Concept erased and evaluated by default.
    pub concept: String,
    pub engine: EngineConfig,
    pub edit: EditSection,
    pub capture: CaptureConfig,
    pub probe: ProbeConfig,
    pub probe_eval: ProbeSetup,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            concept: "pikachu".into(),
            engine: EngineConfig::default(),
            edit: EditSection::default(),
            capture: CaptureConfig::default(),
            probe: ProbeConfig::default(),
            probe_eval: ProbeSetup::default(),
            suite: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            tau_f: self.edit.tau_f,
            tau_r: self.edit.tau_r,
            capture: self.capture,
            mode: self.edit.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate().map_err(|e| match e {
            Error::ConfigError(reason) => Error::ValidationError {
                key: "engine".into(),
                reason,
            },
            other => other,
        })?;
        self.edit_config().validate()?;
        self.probe.validate()?;
        self.suite.validate()?;
        if self.probe_eval.natural_prompts == 0 {
            return Err(Error::ValidationError {
                key: "probe_eval.natural_prompts".into(),
                reason: "must be at least 1".into(),
            });
        }
        let vocab = Vocabulary::builtin();
        match vocab.id(&self.concept) {
            Ok(id) if vocab.is_concept(id) => {}
            _ => {
                return Err(Error::ValidationError {
                    key: "concept".into(),
                    reason: format!("`{}` is not a concept of the vocabulary", self.concept),
                })
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    Error::ParseError(format!("line {line}: {msg}"))
                }
                None => Error::ParseError(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ParseError(e.to_string()))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}
