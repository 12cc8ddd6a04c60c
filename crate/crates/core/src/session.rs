//! Sessions and their ordered message streams.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAIN_STREAM: &str = "main";
pub const DEFAULT_NAMESPACE: &str = "default";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Data,
    Control,
    Status,
    Prompt,
    Answer,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMessage {
    pub seq: u64,
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub payload: serde_json::Value,
}

/// Append-only message log. Sequence numbers start at 1 and have no gaps.
#[derive(Debug, Default)]
pub struct Stream {
    messages: Mutex<Vec<StreamMessage>>,
    grown: Condvar,
}

impl Stream {
    pub fn append(&self, kind: MessageKind, node_id: Option<&str>, payload: serde_json::Value) -> u64 {
        let mut msgs = self.messages.lock().unwrap();
        let seq = msgs.len() as u64 + 1;
        msgs.push(StreamMessage {
            seq,
            kind,
            node_id: node_id.map(str::to_string),
            payload,
        });
        drop(msgs);
        self.grown.notify_all();
        seq
    }

    /// Messages with `seq > after`, in order.
    pub fn read_after(&self, after: u64) -> Vec<StreamMessage> {
        let msgs = self.messages.lock().unwrap();
        msgs.iter().skip(after as usize).cloned().collect()
    }

    /// Like [`read_after`](Self::read_after) but blocks up to `timeout` for
    /// at least one new message.
    pub fn wait_after(&self, after: u64, timeout: Duration) -> Vec<StreamMessage> {
        let deadline = Instant::now() + timeout;
        let mut msgs = self.messages.lock().unwrap();
        while msgs.len() as u64 <= after {
            let now = Instant::now();
            if now >= deadline {
                return Vec::new();
            }
            msgs = self.grown.wait_timeout(msgs, deadline - now).unwrap().0;
        }
        msgs.iter().skip(after as usize).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.messages.lock().unwrap().len() as u64
    }

    pub fn wake(&self) {
        self.grown.notify_all();
    }
}

#[derive(Debug)]
pub struct Session {
    pub session_id: String,
    pub created_at_ms: i64,
    pub namespace: String,
    streams: RwLock<BTreeMap<String, Arc<Stream>>>,
    closed: AtomicBool,
}

impl Session {
    pub fn new(session_id: impl Into<String>, namespace: impl Into<String>, created_at_ms: i64) -> Self {
        let mut streams = BTreeMap::new();
        streams.insert(MAIN_STREAM.to_string(), Arc::new(Stream::default()));
        Session {
            session_id: session_id.into(),
            created_at_ms,
            namespace: namespace.into(),
            streams: RwLock::new(streams),
            closed: AtomicBool::new(false),
        }
    }

    pub fn stream(&self, id: &str) -> Option<Arc<Stream>> {
        self.streams.read().unwrap().get(id).cloned()
    }

    pub fn main(&self) -> Arc<Stream> {
        self.stream(MAIN_STREAM).expect("main stream always exists")
    }

    /// Opens (or returns) a named stream.
    pub fn open_stream(&self, id: &str) -> Arc<Stream> {
        let mut streams = self.streams.write().unwrap();
        streams.entry(id.to_string()).or_default().clone()
    }

    pub fn emit(&self, kind: MessageKind, node_id: Option<&str>, payload: serde_json::Value) -> u64 {
        self.main().append(kind, node_id, payload)
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        for s in self.streams.read().unwrap().values() {
            s.wake();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn ensure_open(&self) -> Result<()> {
        if self.is_closed() {
            Err(Error::Cancelled(format!("session `{}` is closed", self.session_id)))
        } else {
            Ok(())
        }
    }
}
