//! Run configuration. Values come from the preset, then the `--config`
//! TOML file, then explicit flags, each layer overriding the previous one.

use crate::error::{CliError, Result};
use bsonet_core::baselines::BaselineConfig;
use bsonet_core::n2v::N2VConfig;
use bsonet_model::train::TrainConfig;
use bsonet_model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    /// Gaussian noise level, raw units.
    pub sigma: f64,
    /// `bsr` or `png`.
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSection {
    pub bind: String,
    pub storage_root: String,
    pub workers: usize,
    pub queue_depth: usize,
    /// Client-side timeout for `send`.
    pub timeout_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n2v: N2VConfig,
    pub baselines: BaselineConfig,
    pub server: ServerSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Toy => (ModelConfig::toy(), TrainConfig::toy()),
            Preset::Paper => (ModelConfig::paper(), TrainConfig::default()),
        };
        let size = model.working_size().0;
        Self {
            preset,
            seed: 0,
            data: DataConfig { count: 32, size, sigma: 400.0, format: "bsr".into() },
            model,
            train,
            n2v: N2VConfig::default(),
            baselines: BaselineConfig::default(),
            server: ServerSection {
                bind: bsonet_service::server::DEFAULT_BIND.into(),
                storage_root: "results".into(),
                workers: 1,
                queue_depth: 16,
                timeout_secs: bsonet_service::DEFAULT_TIMEOUT.as_secs_f64(),
            },
        }
    }

    /// Builds the preset (flag, else the file's `preset`, else toy) and
    /// overlays the file.
    pub fn load(file: Option<&Path>, preset_flag: Option<Preset>) -> Result<Self> {
        let overlay = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(path.display(), e))?;
                let value: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("{}: {}", path.display(), one_line(&e))))?;
                Some(value)
            }
            None => None,
        };
        let file_preset = overlay
            .as_ref()
            .and_then(|t| t.get("preset"))
            .map(|v| v.clone().try_into::<Preset>())
            .transpose()
            .map_err(|e| CliError::usage(format!("preset: {}", one_line(&e))))?;
        let preset = preset_flag.or(file_preset).unwrap_or_default();
        let mut base = toml::Table::try_from(Self::preset(preset))
            .map_err(|e| CliError::Failed(e.to_string()))?;
        if let Some(overlay) = overlay {
            merge(&mut base, overlay);
        }
        base.insert("preset".into(), toml::Value::try_from(preset).unwrap());
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", one_line(&e))))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is representable as TOML")
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(path.display(), e))
    }
}

fn one_line(e: &dyn std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
