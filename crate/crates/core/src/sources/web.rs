//! Web source: a pluggable document fetcher plus schema-guided extraction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::registry::Properties;
use crate::sources::llm::{prompts, render_prompt, LlmSource};
use crate::value::{Schema, Table};

pub trait Fetcher: Send + Sync {
    fn fetch(&self, key: &str) -> Result<String>;
}

/// Reads documents from a local corpus directory. An optional `index.json`
/// maps keys (usually URLs) to file names; otherwise the key is the file
/// name.
#[derive(Debug)]
pub struct FixtureFetcher {
    dir: PathBuf,
    index: BTreeMap<String, String>,
}

impl FixtureFetcher {
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let index = if index_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&index_path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(FixtureFetcher {
            dir: dir.to_path_buf(),
            index,
        })
    }

    /// Path of the document stored for `key`, if it exists.
    pub fn path_for(&self, key: &str) -> Option<PathBuf> {
        let name = self.index.get(key).map(String::as_str).unwrap_or(key);
        if name.contains("..") || name.starts_with('/') {
            return None;
        }
        let p = self.dir.join(name);
        p.is_file().then_some(p)
    }
}

impl Fetcher for FixtureFetcher {
    fn fetch(&self, key: &str) -> Result<String> {
        let p = self.path_for(key).ok_or_else(|| Error::not_found("web fixture", key))?;
        Ok(std::fs::read_to_string(p)?)
    }
}

/// Live HTTP fetcher; only used when a source's connection sets `live`.
#[cfg(feature = "http-llm")]
#[derive(Debug, Default)]
pub struct HttpFetcher;

#[cfg(feature = "http-llm")]
impl Fetcher for HttpFetcher {
    fn fetch(&self, key: &str) -> Result<String> {
        let unreachable = |m: String| Error::Connectivity {
            source_id: key.to_string(),
            message: m,
        };
        let resp = reqwest::blocking::get(key).map_err(|e| unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unreachable(format!("HTTP {}", resp.status())));
        }
        resp.text().map_err(|e| unreachable(e.to_string()))
    }
}

pub struct WebSource {
    source_id: String,
    fetcher: Box<dyn Fetcher>,
    /// LLM source used for extraction; the manager's default when absent.
    pub llm_source: Option<String>,
}

impl std::fmt::Debug for WebSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WebSource").field("source_id", &self.source_id).finish()
    }
}

impl WebSource {
    pub fn new(source_id: impl Into<String>, fetcher: Box<dyn Fetcher>, llm_source: Option<String>) -> Self {
        WebSource {
            source_id: source_id.into(),
            fetcher,
            llm_source,
        }
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn fetch(&self, key: &str) -> Result<String> {
        self.fetcher.fetch(key)
    }

    /// Fetches the document and extracts schema-shaped rows through `llm`.
    /// An empty document yields an empty table without calling the model.
    pub fn extract(&self, llm: &LlmSource, key: &str, schema: &Schema, props: &Properties) -> Result<Table> {
        let doc = self.fetcher.fetch(key)?;
        if doc.trim().is_empty() {
            return Ok(Table::with_schema(Vec::new(), schema.clone()));
        }
        let prompt = render_prompt(prompts::WEB_EXTRACT, key, doc.trim_end(), schema);
        llm.complete_verified(&prompt, schema, props, None)
    }
}
