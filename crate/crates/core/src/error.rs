use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category exposed at the service boundary. Every [`Error`]
/// maps to exactly one code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    Conflict,
    Infeasible,
    BackendUnreachable,
    VerificationFailed,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::NotFound => "not_found",
            ErrorCode::Conflict => "conflict",
            ErrorCode::Infeasible => "infeasible",
            ErrorCode::BackendUnreachable => "backend_unreachable",
            ErrorCode::VerificationFailed => "verification_failed",
            ErrorCode::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("{kind} `{id}` already exists")]
    Conflict { kind: &'static str, id: String },

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("operator `{operator}` takes {expected} input table(s), got {got}")]
    Arity {
        operator: String,
        expected: String,
        got: usize,
    },

    #[error("policy violation: {0}")]
    Policy(String),

    #[error("source `{source_id}` rejected query: {message}")]
    Query { source_id: String, message: String },

    #[error("source `{source_id}` unreachable: {message}")]
    Connectivity { source_id: String, message: String },

    #[error("verification failed: {message}")]
    Verification {
        message: String,
        violations: Vec<Violation>,
    },

    #[error("cancelled: {0}")]
    Cancelled(String),

    #[error("operator `{0}` is abstract and cannot be executed")]
    AbstractOperator(String),

    #[error("refinement depth {depth} exceeded at node `{node}` (operator `{operator}`)")]
    DepthExceeded { node: String, operator: String, depth: u32 },

    #[error("refinement failed: {0}")]
    Refinement(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(crate::planner::ValidationReport),

    #[error("objective infeasible: every member of alternatives group `{group}` is below the quality floor")]
    Infeasible { group: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Serialization(_)
            | Error::Syntax { .. }
            | Error::Invalid { .. }
            | Error::Arity { .. }
            | Error::Policy(_)
            | Error::Query { .. }
            | Error::AbstractOperator(_)
            | Error::DepthExceeded { .. }
            | Error::Refinement(_)
            | Error::InvalidPlan(_) => ErrorCode::BadRequest,
            Error::NotFound { .. } => ErrorCode::NotFound,
            Error::Conflict { .. } | Error::Cancelled(_) => ErrorCode::Conflict,
            Error::Infeasible { .. } => ErrorCode::Infeasible,
            Error::Connectivity { .. } => ErrorCode::BackendUnreachable,
            Error::Verification { .. } => ErrorCode::VerificationFailed,
            Error::Io(_) | Error::Internal(_) => ErrorCode::Internal,
        }
    }

    /// Structured detail for the service boundary, when the error carries any.
    pub fn detail(&self) -> Option<serde_json::Value> {
        match self {
            Error::Verification { violations, .. } => serde_json::to_value(violations).ok(),
            Error::InvalidPlan(report) => serde_json::to_value(report).ok(),
            Error::Syntax { offset, .. } => Some(serde_json::json!({ "offset": offset })),
            _ => None,
        }
    }

    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound { kind, id: id.into() }
    }

    pub fn verification(message: impl Into<String>, violations: Vec<Violation>) -> Self {
        Error::Verification {
            message: message.into(),
            violations,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

/// The wire form of an error: stream `error` payloads and service bodies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        ErrorBody {
            code: e.code(),
            message: e.to_string(),
            detail: e.detail(),
        }
    }
}
