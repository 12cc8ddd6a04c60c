//! The user as a data source: a stored profile with freshness, plus
//! interactive prompts over the session stream.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::schema::{validate_schema, Violation};
use crate::session::{MessageKind, Session};
use crate::value::{Row, Schema, Table, Value};

pub const DEFAULT_TTL_SECONDS: i64 = 86_400;
/// Answers accepted per question before the node fails: the first prompt
/// plus two re-prompts.
pub const MAX_ANSWER_ATTEMPTS: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfileEntry {
    pub key: String,
    pub value: Table,
    pub asked_at_ms: i64,
    pub ttl_seconds: i64,
}

impl UserProfileEntry {
    pub fn is_fresh(&self, now_ms: i64) -> bool {
        now_ms - self.asked_at_ms < self.ttl_seconds.saturating_mul(1000)
    }
}

/// Profile key: lowercase, punctuation stripped, whitespace collapsed.
pub fn normalize_question(q: &str) -> String {
    q.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PendingPrompt {
    pub prompt_id: String,
    pub session_id: String,
    pub node_id: Option<String>,
    pub question: String,
    pub output_schema: Option<Schema>,
    pub ttl_seconds: i64,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UserOutcome {
    Answered(Table),
    Prompted { prompt_id: String },
}

#[derive(Debug)]
pub enum AnswerOutcome {
    Accepted(Table),
    Reprompted {
        prompt_id: String,
        violations: Vec<Violation>,
    },
    Failed(Error),
}

type Profiles = BTreeMap<String, BTreeMap<String, UserProfileEntry>>;

pub struct UserSource {
    clock: Arc<dyn Clock>,
    profiles: RwLock<Profiles>,
    pending: Mutex<HashMap<String, PendingPrompt>>,
    store: Option<PathBuf>,
}

impl std::fmt::Debug for UserSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserSource").field("store", &self.store).finish()
    }
}

/// Turns an answer into a table. Objects and arrays of objects are taken as
/// rows; a string holding JSON is parsed first; any other scalar or free
/// text becomes one row with one attribute named after the schema's first
/// column (or `answer`).
pub fn answer_to_table(answer: &serde_json::Value, schema: Option<&Schema>) -> Table {
    let attr = schema
        .and_then(|s| s.keys().next().cloned())
        .unwrap_or_else(|| "answer".to_string());
    let scalar_row = |v: Value| {
        let mut r = Row::new();
        r.insert(attr.clone(), v);
        Table::new(vec![r])
    };
    let parsed = match answer {
        serde_json::Value::String(s) => serde_json::from_str::<serde_json::Value>(s.trim())
            .ok()
            .filter(|j| !j.is_string())
            .unwrap_or_else(|| answer.clone()),
        other => other.clone(),
    };
    match Value::from_json(parsed) {
        Ok(Value::Map(m)) => match Row::try_from(m) {
            Ok(r) => Table::new(vec![r]),
            Err(_) => scalar_row(Value::from(answer.to_string())),
        },
        Ok(Value::List(items)) if items.iter().all(|v| matches!(v, Value::Map(_))) && !items.is_empty() => {
            let rows: std::result::Result<Vec<Row>, _> = items
                .into_iter()
                .map(|v| match v {
                    Value::Map(m) => Row::try_from(m),
                    _ => unreachable!(),
                })
                .collect();
            rows.map(Table::new)
                .unwrap_or_else(|_| scalar_row(Value::from(answer.to_string())))
        }
        Ok(v) => scalar_row(v),
        Err(_) => scalar_row(Value::from(answer.to_string())),
    }
}

/// Answer verification: schema conformance with every schema attribute
/// present and non-null in every row, and at least one row.
pub fn verify_answer(table: &Table, schema: Option<&Schema>) -> Vec<Violation> {
    let Some(schema) = schema else {
        return Vec::new();
    };
    let strict: Schema = schema
        .iter()
        .map(|(k, spec)| (k.clone(), spec.clone().required()))
        .collect();
    let mut report = validate_schema(table, &strict);
    for (i, row) in table.rows.iter().enumerate() {
        for name in strict.keys() {
            if row.get(name).is_some_and(Value::is_null) {
                report.push(Violation {
                    row: i,
                    attribute: name.clone(),
                    kind: crate::schema::ViolationKind::MissingRequired,
                });
            }
        }
    }
    if table.rows.is_empty() {
        report.push(Violation {
            row: 0,
            attribute: String::new(),
            kind: crate::schema::ViolationKind::Rejected {
                reason: "empty answer".into(),
            },
        });
    }
    report
}

impl UserSource {
    pub fn new(clock: Arc<dyn Clock>, store: Option<PathBuf>) -> Result<Self> {
        let profiles = match &store {
            Some(p) if p.exists() => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            _ => Profiles::new(),
        };
        Ok(UserSource {
            clock,
            profiles: RwLock::new(profiles),
            pending: Mutex::new(HashMap::new()),
            store,
        })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn profile(&self, namespace: &str, question: &str) -> Option<UserProfileEntry> {
        let key = normalize_question(question);
        self.profiles.read().unwrap().get(namespace)?.get(&key).cloned()
    }

    pub fn has_fresh(&self, namespace: &str, question: &str) -> bool {
        let now = self.clock.now_ms();
        self.profile(namespace, question).is_some_and(|e| e.is_fresh(now))
    }

    pub fn store_profile(&self, namespace: &str, question: &str, value: Table, ttl_seconds: i64) -> Result<()> {
        let key = normalize_question(question);
        let entry = UserProfileEntry {
            key: key.clone(),
            value,
            asked_at_ms: self.clock.now_ms(),
            ttl_seconds,
        };
        let mut profiles = self.profiles.write().unwrap();
        profiles.entry(namespace.to_string()).or_default().insert(key, entry);
        if let Some(path) = &self.store {
            crate::persist::write_atomic(path, serde_json::to_string_pretty(&*profiles)?.as_bytes())?;
        }
        Ok(())
    }

    pub fn pending(&self, prompt_id: &str) -> Option<PendingPrompt> {
        self.pending.lock().unwrap().get(prompt_id).cloned()
    }

    pub fn pending_for_session(&self, session_id: &str) -> Vec<PendingPrompt> {
        let mut out: Vec<PendingPrompt> = self
            .pending
            .lock()
            .unwrap()
            .values()
            .filter(|p| p.session_id == session_id)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
        out
    }

    /// Drops every open prompt of a session, returning their ids.
    pub fn cancel_session(&self, session_id: &str) -> Vec<String> {
        let mut pending = self.pending.lock().unwrap();
        let ids: Vec<String> = pending
            .values()
            .filter(|p| p.session_id == session_id)
            .map(|p| p.prompt_id.clone())
            .collect();
        for id in &ids {
            pending.remove(id);
        }
        ids
    }

    fn emit_prompt(&self, session: &Session, p: &PendingPrompt, violations: &[Violation]) {
        let mut payload = json!({
            "prompt_id": p.prompt_id,
            "question": p.question,
            "output_schema": p.output_schema,
            "attempt": p.attempts + 1,
        });
        if !violations.is_empty() {
            payload["violations"] = serde_json::to_value(violations).unwrap_or_default();
        }
        session.emit(MessageKind::Prompt, p.node_id.as_deref(), payload);
    }

    /// Returns the stored answer when fresh, otherwise emits a prompt on the
    /// session stream.
    pub fn user_query(
        &self,
        session: &Session,
        question: &str,
        output_schema: Option<&Schema>,
        ttl_seconds: Option<i64>,
        node_id: Option<&str>,
    ) -> Result<UserOutcome> {
        session.ensure_open()?;
        let now = self.clock.now_ms();
        if let Some(e) = self.profile(&session.namespace, question) {
            if e.is_fresh(now) {
                return Ok(UserOutcome::Answered(e.value));
            }
        }
        let p = PendingPrompt {
            prompt_id: uuid::Uuid::new_v4().to_string(),
            session_id: session.session_id.clone(),
            node_id: node_id.map(str::to_string),
            question: question.to_string(),
            output_schema: output_schema.cloned(),
            ttl_seconds: ttl_seconds.unwrap_or(DEFAULT_TTL_SECONDS),
            attempts: 0,
        };
        self.emit_prompt(session, &p, &[]);
        let id = p.prompt_id.clone();
        self.pending.lock().unwrap().insert(id.clone(), p);
        Ok(UserOutcome::Prompted { prompt_id: id })
    }

    /// Handles an answer to an open prompt: verified answers are stored in
    /// the profile, malformed ones trigger a re-prompt until the attempt
    /// bound is reached.
    pub fn submit_answer(
        &self,
        session: &Session,
        prompt_id: &str,
        answer: &serde_json::Value,
    ) -> Result<AnswerOutcome> {
        session.ensure_open()?;
        let p = {
            let mut pending = self.pending.lock().unwrap();
            match pending.get(prompt_id) {
                Some(p) if p.session_id == session.session_id => pending.remove(prompt_id).unwrap(),
                _ => return Err(Error::not_found("prompt", prompt_id)),
            }
        };
        session.emit(
            MessageKind::Answer,
            p.node_id.as_deref(),
            json!({"prompt_id": prompt_id, "answer": answer}),
        );
        let mut table = answer_to_table(answer, p.output_schema.as_ref());
        let report = verify_answer(&table, p.output_schema.as_ref());
        if report.is_empty() {
            if let Some(s) = &p.output_schema {
                table.schema = Some(s.clone());
            }
            self.store_profile(&session.namespace, &p.question, table.clone(), p.ttl_seconds)?;
            return Ok(AnswerOutcome::Accepted(table));
        }
        let attempts = p.attempts + 1;
        if attempts >= MAX_ANSWER_ATTEMPTS {
            return Ok(AnswerOutcome::Failed(Error::verification(
                format!("{attempts} malformed answers to `{}`", p.question),
                report,
            )));
        }
        let next = PendingPrompt {
            prompt_id: uuid::Uuid::new_v4().to_string(),
            attempts,
            ..p
        };
        self.emit_prompt(session, &next, &report);
        let id = next.prompt_id.clone();
        self.pending.lock().unwrap().insert(id.clone(), next);
        Ok(AnswerOutcome::Reprompted {
            prompt_id: id,
            violations: report,
        })
    }
}
