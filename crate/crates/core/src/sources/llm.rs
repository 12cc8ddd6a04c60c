//! LLM source: backends, prompt templates, and the verified query pipeline
//! (rewrite, cache, call, verify, retry).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::canonical::digest_of;
use crate::error::{Error, Result};
use crate::registry::Properties;
use crate::schema::{render_report, validate_schema, Violation};
use crate::value::{ColumnSpec, DeclaredType, Row, Schema, Table, Value};

pub const DEFAULT_MAX_RETRIES: i64 = 2;

/// Fixed, versioned prompt templates.
pub mod prompts {
    pub const NL2LLM: &str = include_str!("../../assets/prompts/nl2llm.txt");
    pub const NL2SQL: &str = include_str!("../../assets/prompts/nl2sql.txt");
    pub const QUERY_BREAKDOWN: &str = include_str!("../../assets/prompts/query_breakdown.txt");
    pub const WEB_EXTRACT: &str = include_str!("../../assets/prompts/web_extract.txt");
}

/// Fills `{{question}}`, `{{context}}` and `{{schema}}` placeholders.
pub fn render_prompt(template: &str, question: &str, context: &str, schema: &Schema) -> String {
    template
        .replace("{{question}}", question)
        .replace("{{context}}", context)
        .replace("{{schema}}", &render_schema(schema))
}

pub fn render_schema(schema: &Schema) -> String {
    schema
        .iter()
        .map(|(name, spec)| {
            let mut line = format!("- {name}: {}", spec.ty);
            if spec.required {
                line.push_str(" (required)");
            }
            if !spec.description.is_empty() {
                line.push_str(&format!(" -- {}", spec.description));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Query rewriting: trims and collapses whitespace.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

const STOP_WORDS: &[&str] = &[
    "a",
    "about",
    "all",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "by",
    "can",
    "considered",
    "did",
    "do",
    "does",
    "for",
    "from",
    "give",
    "has",
    "have",
    "how",
    "i",
    "in",
    "is",
    "it",
    "list",
    "many",
    "me",
    "much",
    "my",
    "of",
    "on",
    "or",
    "our",
    "please",
    "show",
    "so",
    "some",
    "tell",
    "that",
    "the",
    "their",
    "there",
    "these",
    "this",
    "those",
    "to",
    "us",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "who",
    "whom",
    "why",
    "with",
    "you",
    "your",
];

/// Automatic schema design: one string column named after the last token of
/// the question that is neither a stop word nor a number. Falls back to
/// `answer`.
pub fn auto_schema(question: &str) -> Schema {
    let name = crate::registry::tokenize(question)
        .into_iter()
        .rfind(|t| !STOP_WORDS.contains(&t.as_str()) && !t.chars().all(|c| c.is_ascii_digit()))
        .unwrap_or_else(|| "answer".to_string());
    let mut s = Schema::new();
    s.insert(name, ColumnSpec::new(DeclaredType::String));
    s
}

/// A language-model backend producing a table for a prompt.
pub trait LlmBackend: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, output_schema: &Schema, properties: &Properties) -> Result<Table>;
    /// Number of completed backend calls so far.
    fn calls(&self) -> u64;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum StubResponse {
    Rows(Vec<Row>),
    Table(Table),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StubRule {
    pub pattern: String,
    response: StubResponse,
}

impl StubRule {
    pub fn new(pattern: &str, rows: Vec<Row>) -> Self {
        StubRule {
            pattern: pattern.to_string(),
            response: StubResponse::Rows(rows),
        }
    }
}

/// Deterministic backend: the first rule whose regex matches the prompt
/// supplies the response; no match yields an empty table.
pub struct StubBackend {
    name: String,
    rules: Vec<(Regex, Table)>,
    calls: AtomicU64,
}

impl std::fmt::Debug for StubBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubBackend")
            .field("name", &self.name)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl StubBackend {
    pub fn new(name: &str, rules: Vec<StubRule>) -> Result<Self> {
        let mut compiled = Vec::with_capacity(rules.len());
        for r in rules {
            let re = Regex::new(&r.pattern).map_err(|e| Error::invalid("stub pattern", e.to_string()))?;
            let table = match r.response {
                StubResponse::Rows(rows) => Table::new(rows),
                StubResponse::Table(t) => t,
            };
            compiled.push((re, table));
        }
        Ok(StubBackend {
            name: name.to_string(),
            rules: compiled,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rules: Vec<StubRule> = serde_json::from_str(&text)?;
        Self::new(name, rules)
    }
}

impl LlmBackend for StubBackend {
    fn id(&self) -> String {
        format!("stub:{}", self.name)
    }

    fn complete(&self, prompt: &str, _schema: &Schema, _props: &Properties) -> Result<Table> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .rules
            .iter()
            .find(|(re, _)| re.is_match(prompt))
            .map(|(_, t)| t.clone())
            .unwrap_or_default())
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Parses a model reply into rows: a JSON array of objects, an object with a
/// `rows` array, or a single object. Anything else becomes one `_raw` row so
/// that verification rejects it and the pipeline retries.
pub fn parse_reply(text: &str) -> Table {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed)
        .trim();
    let rows = match serde_json::from_str::<Value>(body) {
        Ok(Value::List(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::Map(m) => Row::try_from(m).ok(),
                _ => None,
            })
            .collect::<Option<Vec<Row>>>(),
        Ok(Value::Map(mut m)) => match m.remove("rows") {
            Some(Value::List(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::Map(m) => Row::try_from(m).ok(),
                    _ => None,
                })
                .collect(),
            Some(other) => {
                m.insert("rows".into(), other);
                Row::try_from(m).ok().map(|r| vec![r])
            }
            None => Row::try_from(m).ok().map(|r| vec![r]),
        },
        _ => None,
    };
    rows.map(Table::new).unwrap_or_else(|| {
        let mut r = Row::new();
        r.insert("_raw", text);
        Table::new(vec![r])
    })
}

/// OpenAI-compatible chat-completions client.
#[cfg(feature = "http-llm")]
pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

#[cfg(feature = "http-llm")]
impl HttpBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
            calls: AtomicU64::new(0),
        })
    }
}

#[cfg(feature = "http-llm")]
impl LlmBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}:{}", self.base_url, self.model)
    }

    fn complete(&self, prompt: &str, _schema: &Schema, props: &Properties) -> Result<Table> {
        let model = props.get("model").and_then(Value::as_str).unwrap_or(&self.model);
        let temperature = props.get("temperature").and_then(Value::as_f64).unwrap_or(0.0);
        let body = serde_json::json!({
            "model": model,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": "Reply with JSON only."},
                {"role": "user", "content": prompt},
            ],
        });
        let unreachable = |m: String| Error::Connectivity {
            source_id: self.base_url.clone(),
            message: m,
        };
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| unreachable(e.to_string()))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !resp.status().is_success() {
            return Err(unreachable(format!("HTTP {}", resp.status())));
        }
        let json: serde_json::Value = resp.json().map_err(|e| unreachable(e.to_string()))?;
        let content = json["choices"][0]["message"]["content"].as_str().unwrap_or_default();
        Ok(parse_reply(content))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Extra semantic check applied after schema verification.
pub type Verifier<'a> = &'a dyn Fn(&Table) -> Vec<Violation>;

/// An LLM treated as a database: verified, cached, schema-shaped answers.
pub struct LlmSource {
    source_id: String,
    backend: Arc<dyn LlmBackend>,
    cache: Mutex<BTreeMap<String, Table>>,
    hits: AtomicU64,
}

impl std::fmt::Debug for LlmSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmSource")
            .field("source_id", &self.source_id)
            .field("backend", &self.backend.id())
            .finish()
    }
}

fn prop_bool(props: &Properties, key: &str, default: bool) -> bool {
    props.get(key).and_then(Value::as_bool).unwrap_or(default)
}

pub fn max_retries(props: &Properties) -> i64 {
    props
        .get("max_retries")
        .and_then(Value::as_i64)
        .unwrap_or(DEFAULT_MAX_RETRIES)
        .max(0)
}

/// Fills schema attributes missing from a row with null and attaches the
/// schema.
fn conform(mut table: Table, schema: &Schema) -> Table {
    for row in &mut table.rows {
        for name in schema.keys() {
            if !row.contains(name) {
                row.insert(name.clone(), Value::Null);
            }
        }
    }
    table.schema = Some(schema.clone());
    table
}

impl LlmSource {
    pub fn new(source_id: impl Into<String>, backend: Arc<dyn LlmBackend>) -> Self {
        LlmSource {
            source_id: source_id.into(),
            backend,
            cache: Mutex::new(BTreeMap::new()),
            hits: AtomicU64::new(0),
        }
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    pub fn backend_calls(&self) -> u64 {
        self.backend.calls()
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().clear();
    }

    pub fn cache_snapshot(&self) -> BTreeMap<String, Table> {
        self.cache.lock().unwrap().clone()
    }

    pub fn restore_cache(&self, entries: BTreeMap<String, Table>) {
        self.cache.lock().unwrap().extend(entries);
    }

    /// Cache key over the prompt, schema, backend and the properties that
    /// change the model's output.
    pub fn cache_key(&self, prompt: &str, schema: &Schema, props: &Properties) -> Result<String> {
        let relevant: BTreeMap<&String, &Value> = props
            .iter()
            .filter(|(k, _)| matches!(k.as_str(), "model" | "temperature"))
            .collect();
        digest_of(&serde_json::json!({
            "prompt": prompt,
            "schema": schema,
            "backend": self.backend.id(),
            "properties": relevant,
        }))
    }

    /// Sends `prompt`, verifies the reply against `schema` (and `verify`),
    /// and retries with the violations appended up to `max_retries` times.
    pub fn complete_verified(
        &self,
        prompt: &str,
        schema: &Schema,
        props: &Properties,
        verify: Option<Verifier<'_>>,
    ) -> Result<Table> {
        let use_cache = prop_bool(props, "cache", true);
        let key = self.cache_key(prompt, schema, props)?;
        if use_cache {
            let cached = self.cache.lock().unwrap().get(&key).cloned();
            if let Some(t) = cached {
                if verify.is_none_or(|f| f(&t).is_empty()) {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(t);
                }
            }
        }
        let retries = max_retries(props);
        let mut attempt_prompt = prompt.to_string();
        let mut attempt = 0;
        loop {
            let raw = self.backend.complete(&attempt_prompt, schema, props)?;
            let table = conform(raw, schema);
            let mut report = validate_schema(&table, schema);
            if report.is_empty() {
                if let Some(f) = verify {
                    report = f(&table);
                }
            }
            if report.is_empty() {
                if use_cache {
                    self.cache.lock().unwrap().insert(key, table.clone());
                }
                return Ok(table);
            }
            if attempt >= retries {
                return Err(Error::verification(
                    format!(
                        "source `{}` output failed verification after {} attempt(s)",
                        self.source_id,
                        attempt + 1
                    ),
                    report,
                ));
            }
            attempt += 1;
            tracing::debug!(source = %self.source_id, attempt, "retrying after verification failure");
            attempt_prompt = format!(
                "{prompt}\nYOUR PREVIOUS ANSWER WAS REJECTED:\n{}\nReply again following the schema.",
                render_report(&report)
            );
        }
    }

    /// Natural-language query with automatic schema design when no schema
    /// is given.
    pub fn llm_query(&self, question: &str, output_schema: Option<&Schema>, props: &Properties) -> Result<Table> {
        let question = normalize_whitespace(question);
        let schema = output_schema.cloned().unwrap_or_else(|| auto_schema(&question));
        let prompt = render_prompt(prompts::NL2LLM, &question, "", &schema);
        self.complete_verified(&prompt, &schema, props, None)
    }
}
