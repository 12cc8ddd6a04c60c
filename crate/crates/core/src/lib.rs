//! Federated data-plan engine.
//!
//! Heterogeneous sources (relational, vector, LLM, user, web) sit behind one
//! data registry; operators share a single signature over [`DataBatch`]; the
//! planner lowers a natural-language question into an optimized operator DAG
//! that the executor runs over a session stream.

pub mod canonical;
pub mod clock;
pub mod config;
pub mod engine;
pub mod error;
pub mod executor;
pub mod expr;
pub mod operators;
pub mod persist;
pub mod planner;
pub mod registry;
pub mod schema;
pub mod session;
pub mod sources;
pub mod value;

pub use canonical::{canonical_serialize, deserialize_batch, digest};
pub use engine::Engine;
pub use error::{Error, ErrorCode, Result};
pub use expr::{parse_expression, Expr};
pub use schema::{validate_schema, Violation, ViolationKind};
pub use value::{DataBatch, DeclaredType, Row, Schema, Table, Value};
