//! Engine configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::ExecOptions;
use crate::planner::{Objective, DEFAULT_MAX_DEPTH};
use crate::registry::SourceDescriptor;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DIL_CONFIG";

/// Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub sources: Vec<SourceDescriptor>,
    /// Sync every source's metadata when the engine opens.
    #[serde(default)]
    pub sync_on_start: bool,
    /// Registries and caches are persisted here; nothing is written when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dir: Option<PathBuf>,
    /// User profile file; profiles live in memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_store: Option<PathBuf>,
    /// Cost-model constants; the bundled ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_llm: Option<String>,
    #[serde(default)]
    pub default_objective: Objective,
    #[serde(default = "default_depth")]
    pub max_depth: u32,
    #[serde(default)]
    pub executor: ExecOptions,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_depth() -> u32 {
    DEFAULT_MAX_DEPTH
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("config {}", path.display()), e.to_string()))?;
        let mut c: Config = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("config {}", path.display()), e.to_string()))?;
        c.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(c)
    }

    /// The file named by `DIL_CONFIG`.
    pub fn from_env() -> Result<Self> {
        let p = std::env::var(CONFIG_ENV)
            .map_err(|_| Error::invalid("config", format!("no --config given and {CONFIG_ENV} is not set")))?;
        Self::load(Path::new(&p))
    }

    /// `path` resolved against the config directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}
