//! Data registry: source catalog plus a hierarchical metadata tree.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::embed::{cosine, embed, tokenize};
use crate::error::{Error, Result};
use crate::value::{DeclaredType, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Relational,
    Vector,
    Llm,
    User,
    Web,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Relational => "relational",
            Protocol::Vector => "vector",
            Protocol::Llm => "llm",
            Protocol::User => "user",
            Protocol::Web => "web",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub protocol: Protocol,
    #[serde(default)]
    pub connection: BTreeMap<String, Value>,
    #[serde(default = "default_true")]
    pub natural_language_capable: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

fn default_true() -> bool {
    true
}

impl SourceDescriptor {
    pub fn new(source_id: impl Into<String>, protocol: Protocol) -> Self {
        SourceDescriptor {
            source_id: source_id.into(),
            protocol,
            connection: BTreeMap::new(),
            natural_language_capable: true,
            description: String::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.connection.insert(key.to_string(), value.into());
        self
    }

    pub fn described(mut self, d: impl Into<String>) -> Self {
        self.description = d.into();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Source,
    Database,
    Collection,
    Entity,
    Relation,
    Attribute,
    Value,
}

impl Level {
    pub fn path_len(self) -> usize {
        match self {
            Level::Source => 1,
            Level::Database => 2,
            Level::Collection | Level::Entity | Level::Relation => 3,
            Level::Attribute => 4,
            Level::Value => 5,
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distinct_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Value>,
}

pub const MAX_SAMPLES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub path: Vec<String>,
    pub level: Level,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub samples: Vec<Value>,
    #[serde(default)]
    pub statistics: Statistics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_type: Option<DeclaredType>,
    #[serde(default)]
    pub embedding: Vec<f64>,
}

impl MetadataEntry {
    /// Builds an entry and computes its embedding from path and description.
    pub fn new(path: Vec<String>, level: Level, description: impl Into<String>) -> Self {
        let mut e = MetadataEntry {
            path,
            level,
            description: description.into(),
            samples: Vec::new(),
            statistics: Statistics::default(),
            data_type: None,
            embedding: Vec::new(),
        };
        e.refresh_embedding();
        e
    }

    pub fn refresh_embedding(&mut self) {
        self.embedding = embed(&self.search_text());
    }

    pub fn name(&self) -> &str {
        self.path.last().map(String::as_str).unwrap_or("")
    }

    fn search_text(&self) -> String {
        format!("{} {}", self.path.join(" "), self.description)
    }

    fn check(&self) -> Result<()> {
        if self.path.is_empty() || self.path.iter().any(String::is_empty) {
            return Err(Error::invalid("metadata path", format!("{:?}", self.path)));
        }
        if self.path.len() != self.level.path_len() {
            return Err(Error::invalid(
                "metadata path",
                format!(
                    "{:?} has length {} but level {:?} requires {}",
                    self.path,
                    self.path.len(),
                    self.level,
                    self.level.path_len()
                ),
            ));
        }
        if self.samples.len() > MAX_SAMPLES {
            return Err(Error::invalid("metadata samples", "at most 5 samples"));
        }
        if let (Some(d), Some(r)) = (self.statistics.distinct_count, self.statistics.row_count) {
            if d > r {
                return Err(Error::invalid(
                    "metadata statistics",
                    format!("distinct_count {d} exceeds row_count {r}"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-source sync bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncLog {
    pub last_sync_ms: Option<i64>,
    pub sync_count: u64,
}

/// Anything able to enumerate the metadata below a source root.
pub trait MetadataProvider {
    fn collect_metadata(&self, source: &SourceDescriptor) -> Result<Vec<MetadataEntry>>;
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct State {
    sources: BTreeMap<String, SourceDescriptor>,
    #[serde(with = "entry_list")]
    entries: BTreeMap<Vec<String>, MetadataEntry>,
    #[serde(default)]
    logs: BTreeMap<String, SyncLog>,
}

mod entry_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<Vec<String>, MetadataEntry>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(m.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<Vec<String>, MetadataEntry>, D::Error> {
        let list = Vec::<MetadataEntry>::deserialize(d)?;
        let mut out = BTreeMap::new();
        for e in list {
            if out.insert(e.path.clone(), e).is_some() {
                return Err(serde::de::Error::custom("duplicate metadata path"));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry: MetadataEntry,
    pub score: f64,
}

/// Catalog of sources and their metadata. Writes are serialized; readers
/// observe whole snapshots.
#[derive(Debug, Default)]
pub struct DataRegistry {
    state: RwLock<State>,
}

impl DataRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_source(&self, descriptor: SourceDescriptor) -> Result<String> {
        if descriptor.source_id.is_empty() || descriptor.source_id.contains('/') {
            return Err(Error::invalid("source id", format!("`{}`", descriptor.source_id)));
        }
        let mut st = self.state.write().unwrap();
        if st.sources.contains_key(&descriptor.source_id) {
            return Err(Error::Conflict {
                kind: "source",
                id: descriptor.source_id,
            });
        }
        let id = descriptor.source_id.clone();
        let desc = if descriptor.description.is_empty() {
            format!("{} source", descriptor.protocol.as_str())
        } else {
            descriptor.description.clone()
        };
        let root = MetadataEntry::new(vec![id.clone()], Level::Source, desc);
        st.entries.insert(root.path.clone(), root);
        st.sources.insert(id.clone(), descriptor);
        st.logs.insert(id.clone(), SyncLog::default());
        Ok(id)
    }

    pub fn source(&self, id: &str) -> Option<SourceDescriptor> {
        self.state.read().unwrap().sources.get(id).cloned()
    }

    /// All sources ordered by id.
    pub fn list_sources(&self) -> Vec<SourceDescriptor> {
        self.state.read().unwrap().sources.values().cloned().collect()
    }

    pub fn sources_with(&self, protocol: Protocol) -> Vec<SourceDescriptor> {
        self.list_sources()
            .into_iter()
            .filter(|s| s.protocol == protocol)
            .collect()
    }

    pub fn insert_entry(&self, entry: MetadataEntry) -> Result<()> {
        entry.check()?;
        let mut st = self.state.write().unwrap();
        if !st.sources.contains_key(&entry.path[0]) {
            return Err(Error::not_found("source", entry.path[0].clone()));
        }
        if st.entries.contains_key(&entry.path) {
            return Err(Error::Conflict {
                kind: "metadata path",
                id: entry.path.join("/"),
            });
        }
        st.entries.insert(entry.path.clone(), entry);
        Ok(())
    }

    pub fn get(&self, path: &[String]) -> Option<MetadataEntry> {
        self.state.read().unwrap().entries.get(path).cloned()
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every entry below and including the source root, ordered by path.
    pub fn subtree(&self, source_id: &str) -> Vec<MetadataEntry> {
        let st = self.state.read().unwrap();
        st.entries
            .range(vec![source_id.to_string()]..)
            .take_while(|(p, _)| p[0] == source_id)
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn collections(&self, source_id: &str) -> Vec<MetadataEntry> {
        self.subtree(source_id)
            .into_iter()
            .filter(|e| e.level == Level::Collection)
            .collect()
    }

    pub fn attributes(&self, source_id: &str, collection: &str) -> Vec<MetadataEntry> {
        self.subtree(source_id)
            .into_iter()
            .filter(|e| e.level == Level::Attribute && e.path[2] == collection)
            .collect()
    }

    pub fn sync_log(&self, source_id: &str) -> Option<SyncLog> {
        self.state.read().unwrap().logs.get(source_id).cloned()
    }

    /// Re-reads a source's metadata and atomically replaces everything below
    /// its root. On any failure the previous subtree is left untouched.
    pub fn sync_source(&self, source_id: &str, provider: &dyn MetadataProvider) -> Result<Vec<MetadataEntry>> {
        let descriptor = self
            .source(source_id)
            .ok_or_else(|| Error::not_found("source", source_id))?;
        let fresh = provider.collect_metadata(&descriptor)?;
        let mut seen = BTreeSet::new();
        for e in &fresh {
            e.check()?;
            if e.path[0] != source_id || e.level == Level::Source {
                return Err(Error::invalid(
                    "synced metadata",
                    format!("entry {:?} outside source `{source_id}`", e.path),
                ));
            }
            if !seen.insert(e.path.clone()) {
                return Err(Error::invalid(
                    "synced metadata",
                    format!("duplicate path {:?}", e.path),
                ));
            }
        }
        let mut st = self.state.write().unwrap();
        let stale: Vec<Vec<String>> = st
            .entries
            .keys()
            .filter(|p| p[0] == source_id && p.len() > 1)
            .cloned()
            .collect();
        for p in stale {
            st.entries.remove(&p);
        }
        for e in fresh {
            st.entries.insert(e.path.clone(), e);
        }
        let log = st.logs.entry(source_id.to_string()).or_default();
        log.sync_count += 1;
        log.last_sync_ms = Some(crate::clock::now_ms());
        drop(st);
        Ok(self.subtree(source_id))
    }

    /// Ranks entries by `0.5 * keyword overlap + 0.5 * embedding cosine`.
    /// Entries whose own name equals the query (case-insensitively) always
    /// rank ahead of the rest; ties break on path.
    pub fn search_metadata(&self, query: &str, level: Option<Level>, top_k: usize) -> Vec<SearchHit> {
        if top_k == 0 {
            return Vec::new();
        }
        let q_tokens: BTreeSet<String> = tokenize(query).into_iter().collect();
        let q_embed = embed(query);
        let needle = query.trim().to_lowercase();
        let st = self.state.read().unwrap();
        let mut scored: Vec<(bool, f64, &MetadataEntry)> = st
            .entries
            .values()
            .filter(|e| level.is_none_or(|l| e.level == l))
            .map(|e| {
                let score = score_entry(&q_tokens, &q_embed, e);
                let exact = !needle.is_empty() && e.name().to_lowercase() == needle;
                (exact, score, e)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then_with(|| a.2.path.cmp(&b.2.path))
        });
        scored
            .into_iter()
            .take(top_k)
            .map(|(_, score, e)| SearchHit {
                entry: e.clone(),
                score,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let st = self.state.read().unwrap();
        Ok(serde_json::to_string_pretty(&*st)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let st: State = serde_json::from_str(text)?;
        for e in st.entries.values() {
            e.check()?;
        }
        Ok(DataRegistry { state: RwLock::new(st) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Shared scoring formula, exposed so callers can explain rankings.
pub fn score_entry(q_tokens: &BTreeSet<String>, q_embed: &[f64], e: &MetadataEntry) -> f64 {
    let keyword = if q_tokens.is_empty() {
        0.0
    } else {
        let e_tokens: BTreeSet<String> = tokenize(&e.search_text()).into_iter().collect();
        q_tokens.intersection(&e_tokens).count() as f64 / q_tokens.len() as f64
    };
    0.5 * keyword + 0.5 * cosine(q_embed, &e.embedding)
}
