//! Optional TOML configuration file.
//!
//! ```toml
//! [backbone]            # toy backbone
//! patch_size = 8
//! channels = 32
//! seed = 0
//!
//! [model]               # any upsampler config; `kind` selects the type
//! kind = "loftup"
//! channels = 32
//! num_blocks = 2
//!
//! [stage1]              # overrides on the stage defaults
//! lr = 1e-3
//! batch_size = 8
//!
//! [stage2]
//! ema_decay = 0.99
//! pseudo_gt = { alpha = 0.8, t_min = 2.0, t_max = 4.0 }
//!
//! [probe]
//! lr = 1e-3
//! epochs = 10
//! ```
//!
//! Command-line flags take precedence over the file.

use std::path::Path;

use loftup_core::backbone::BackboneSpec;
use loftup_core::eval::ProbeConfig;
use loftup_core::trainer::TrainConfig;
use loftup_core::upsampler::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub backbone: BackboneSpec,
    pub stage1: Option<toml::Table>,
    pub stage2: Option<toml::Table>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn stage1(&self) -> Result<TrainConfig, CliError> {
        overlay(TrainConfig::stage1(), self.stage1.as_ref())
    }

    pub fn stage2(&self) -> Result<TrainConfig, CliError> {
        overlay(TrainConfig::stage2(), self.stage2.as_ref())
    }
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Applies the keys of `patch` on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&toml::Table>) -> Result<T, CliError> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut table, patch);
    table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("invalid training section: {e}")))
}
