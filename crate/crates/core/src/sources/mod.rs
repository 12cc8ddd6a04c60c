//! Source adapters behind one registry-driven manager.

pub mod llm;
pub mod relational;
pub mod user;
pub mod vector;
pub mod web;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::persist::substitute_env;
use crate::registry::{DataRegistry, Level, MetadataEntry, MetadataProvider, Properties, Protocol, SourceDescriptor};
use crate::value::{Schema, Table, Value};

pub use llm::{LlmBackend, LlmSource, StubBackend, StubRule};
pub use relational::RelationalSource;
pub use user::{AnswerOutcome, UserOutcome, UserSource};
pub use vector::VectorSource;
pub use web::{Fetcher, FixtureFetcher, WebSource};

/// Owns the live adapters for every registered source.
pub struct SourceManager {
    registry: Arc<DataRegistry>,
    base_dir: PathBuf,
    relational: RwLock<BTreeMap<String, Arc<RelationalSource>>>,
    vector: RwLock<BTreeMap<String, Arc<VectorSource>>>,
    llm: RwLock<BTreeMap<String, Arc<LlmSource>>>,
    web: RwLock<BTreeMap<String, Arc<WebSource>>>,
    users: Arc<UserSource>,
    default_llm: RwLock<Option<String>>,
}

impl std::fmt::Debug for SourceManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceManager")
            .field("sources", &self.registry.list_sources().len())
            .finish()
    }
}

fn string_conn(desc: &SourceDescriptor, key: &str) -> Result<Option<String>> {
    match desc.connection.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Str(s)) => Ok(Some(substitute_env(s)?)),
        Some(other) => Err(Error::invalid(
            format!("connection of `{}`", desc.source_id),
            format!("`{key}` must be a string, got {}", other.type_name()),
        )),
    }
}

impl SourceManager {
    pub fn new(registry: Arc<DataRegistry>, base_dir: impl Into<PathBuf>, users: Arc<UserSource>) -> Self {
        SourceManager {
            registry,
            base_dir: base_dir.into(),
            relational: RwLock::default(),
            vector: RwLock::default(),
            llm: RwLock::default(),
            web: RwLock::default(),
            users,
            default_llm: RwLock::new(None),
        }
    }

    /// No sources, system clock, in-memory profiles.
    pub fn offline() -> Self {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        Self::new(
            Arc::new(DataRegistry::new()),
            ".",
            Arc::new(UserSource::new(clock, None).expect("no profile store to read")),
        )
    }

    pub fn registry(&self) -> &Arc<DataRegistry> {
        &self.registry
    }

    pub fn users(&self) -> &Arc<UserSource> {
        &self.users
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Registers a source in the data registry and connects its adapter.
    /// A source whose adapter cannot be built is not left registered.
    pub fn register(&self, desc: SourceDescriptor) -> Result<String> {
        if self.registry.source(&desc.source_id).is_some() {
            return Err(Error::Conflict {
                kind: "source",
                id: desc.source_id,
            });
        }
        self.connect(&desc)?;
        self.registry.register_source(desc)
    }

    /// Builds the adapter for an already-described source.
    pub fn connect(&self, desc: &SourceDescriptor) -> Result<()> {
        let id = desc.source_id.clone();
        match desc.protocol {
            Protocol::Relational => {
                let mut conn = desc.connection.clone();
                for v in conn.values_mut() {
                    if let Value::Str(s) = v {
                        *s = substitute_env(s)?;
                    }
                }
                let src = RelationalSource::open(&id, &conn, &self.base_dir)?;
                self.relational.write().unwrap().insert(id, Arc::new(src));
            }
            Protocol::Vector => {
                let src = match string_conn(desc, "path")? {
                    Some(p) => VectorSource::from_file(&id, &self.resolve(&p))?,
                    None => VectorSource::new(&id),
                };
                self.vector.write().unwrap().insert(id, Arc::new(src));
            }
            Protocol::Llm => {
                let backend = self.build_backend(desc)?;
                self.add_llm(LlmSource::new(&id, backend));
            }
            Protocol::Web => {
                let live = desc.connection.get("live").and_then(Value::as_bool).unwrap_or(false);
                let fetcher: Box<dyn Fetcher> = if live {
                    live_fetcher(&id)?
                } else {
                    let dir = string_conn(desc, "corpus")?.ok_or_else(|| {
                        Error::invalid(format!("connection of `{id}`"), "web source needs `corpus` or `live`")
                    })?;
                    Box::new(FixtureFetcher::open(&self.resolve(&dir))?)
                };
                let llm = string_conn(desc, "llm_source")?;
                self.web
                    .write()
                    .unwrap()
                    .insert(id.clone(), Arc::new(WebSource::new(id, fetcher, llm)));
            }
            Protocol::User => {}
        }
        Ok(())
    }

    fn build_backend(&self, desc: &SourceDescriptor) -> Result<Arc<dyn LlmBackend>> {
        let kind = string_conn(desc, "backend")?.unwrap_or_else(|| "stub".into());
        match kind.as_str() {
            "stub" => {
                let backend = match string_conn(desc, "mapping")? {
                    Some(p) => StubBackend::from_file(&desc.source_id, &self.resolve(&p)).map_err(|e| match e {
                        Error::Io(io) => Error::Connectivity {
                            source_id: desc.source_id.clone(),
                            message: format!("stub mapping {p}: {io}"),
                        },
                        other => other,
                    })?,
                    None => StubBackend::new(&desc.source_id, Vec::new())?,
                };
                Ok(Arc::new(backend))
            }
            "http" => http_backend(desc),
            other => Err(Error::invalid(
                format!("connection of `{}`", desc.source_id),
                format!("unknown llm backend `{other}`"),
            )),
        }
    }

    /// Installs an LLM adapter directly (e.g. a stub built in code).
    pub fn add_llm(&self, src: LlmSource) -> Arc<LlmSource> {
        let src = Arc::new(src);
        let id = src.source_id().to_string();
        let mut default = self.default_llm.write().unwrap();
        if default.is_none() {
            *default = Some(id.clone());
        }
        self.llm.write().unwrap().insert(id, src.clone());
        src
    }

    pub fn add_vector(&self, src: VectorSource, id: &str) {
        self.vector.write().unwrap().insert(id.to_string(), Arc::new(src));
    }

    pub fn set_default_llm(&self, id: &str) {
        *self.default_llm.write().unwrap() = Some(id.to_string());
    }

    pub fn default_llm(&self) -> Option<String> {
        self.default_llm.read().unwrap().clone()
    }

    pub fn relational(&self, id: &str) -> Result<Arc<RelationalSource>> {
        self.relational
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::not_found("relational source", id))
    }

    pub fn vector(&self, id: &str) -> Result<Arc<VectorSource>> {
        self.vector
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::not_found("vector source", id))
    }

    pub fn llm(&self, id: &str) -> Result<Arc<LlmSource>> {
        self.llm
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::not_found("llm source", id))
    }

    pub fn llm_sources(&self) -> Vec<Arc<LlmSource>> {
        self.llm.read().unwrap().values().cloned().collect()
    }

    /// The LLM named by the `llm_source` property, else the default one.
    pub fn llm_for(&self, props: &Properties) -> Result<Arc<LlmSource>> {
        match props.get("llm_source").and_then(Value::as_str) {
            Some(id) => self.llm(id),
            None => {
                let id = self
                    .default_llm()
                    .ok_or_else(|| Error::not_found("llm source", "<default>"))?;
                self.llm(&id)
            }
        }
    }

    pub fn web(&self, id: &str) -> Result<Arc<WebSource>> {
        self.web
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::not_found("web source", id))
    }

    /// Total backend calls over every LLM source.
    pub fn llm_backend_calls(&self) -> u64 {
        self.llm_sources().iter().map(|s| s.backend_calls()).sum()
    }

    pub fn query_relational(&self, source_id: &str, statement: &str) -> Result<Table> {
        self.relational(source_id)?.query(statement)
    }

    pub fn query_vector(&self, source_id: &str, collection: &str, query: &[f64], k: usize) -> Result<Table> {
        self.vector(source_id)?.query(collection, query, k)
    }

    pub fn llm_query(
        &self,
        source_id: &str,
        question: &str,
        output_schema: Option<&Schema>,
        props: &Properties,
    ) -> Result<Table> {
        self.llm(source_id)?.llm_query(question, output_schema, props)
    }

    pub fn web_extract(&self, source_id: &str, key: &str, schema: &Schema, props: &Properties) -> Result<Table> {
        let web = self.web(source_id)?;
        let llm = match (&web.llm_source, props.get("llm_source")) {
            (_, Some(_)) | (None, None) => self.llm_for(props)?,
            (Some(id), None) => self.llm(id)?,
        };
        web.extract(&llm, key, schema, props)
    }

    pub fn sync(&self, source_id: &str) -> Result<Vec<MetadataEntry>> {
        self.registry.sync_source(source_id, self)
    }
}

#[cfg(feature = "http-llm")]
fn http_backend(desc: &SourceDescriptor) -> Result<Arc<dyn LlmBackend>> {
    let base = string_conn(desc, "base_url")?.ok_or_else(|| {
        Error::invalid(
            format!("connection of `{}`", desc.source_id),
            "http backend needs base_url",
        )
    })?;
    let model = string_conn(desc, "model")?.unwrap_or_else(|| "default".into());
    let key = string_conn(desc, "api_key")?;
    Ok(Arc::new(llm::HttpBackend::new(&base, &model, key)?))
}

#[cfg(not(feature = "http-llm"))]
fn http_backend(desc: &SourceDescriptor) -> Result<Arc<dyn LlmBackend>> {
    Err(Error::invalid(
        format!("connection of `{}`", desc.source_id),
        "built without the http-llm feature",
    ))
}

#[cfg(feature = "http-llm")]
fn live_fetcher(_id: &str) -> Result<Box<dyn Fetcher>> {
    Ok(Box::new(web::HttpFetcher))
}

#[cfg(not(feature = "http-llm"))]
fn live_fetcher(id: &str) -> Result<Box<dyn Fetcher>> {
    Err(Error::invalid(
        format!("connection of `{id}`"),
        "built without the http-llm feature",
    ))
}

fn capability_entry(desc: &SourceDescriptor, text: &str) -> MetadataEntry {
    MetadataEntry::new(
        vec![desc.source_id.clone(), "capabilities".into()],
        Level::Database,
        text.to_string(),
    )
}

impl MetadataProvider for SourceManager {
    fn collect_metadata(&self, desc: &SourceDescriptor) -> Result<Vec<MetadataEntry>> {
        match desc.protocol {
            Protocol::Relational => self.relational(&desc.source_id)?.collect_metadata(),
            Protocol::Vector => Ok(self.vector(&desc.source_id)?.collect_metadata()),
            Protocol::Llm => {
                let llm = self.llm(&desc.source_id)?;
                Ok(vec![capability_entry(
                    desc,
                    &format!(
                        "language model ({}) answering commonsense and world-knowledge questions as tables",
                        llm.backend().id()
                    ),
                )])
            }
            Protocol::User => Ok(vec![capability_entry(
                desc,
                "the user: personal preferences, constraints and requirements, asked interactively and kept in a profile",
            )]),
            Protocol::Web => {
                self.web(&desc.source_id)?;
                Ok(vec![capability_entry(
                    desc,
                    "web pages fetched on demand with schema-guided structured extraction",
                )])
            }
        }
    }
}
