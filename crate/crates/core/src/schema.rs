//! Table conformance checks against a declared schema.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{Schema, Table};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownAttribute,
    TypeMismatch {
        expected: String,
        found: String,
    },
    MissingRequired,
    /// Generated SQL names a relation the source does not have.
    UnknownRelation,
    /// Output rejected for a reason other than a schema mismatch.
    Rejected {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub row: usize,
    pub attribute: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::UnknownAttribute => {
                write!(f, "row {}: unknown attribute `{}`", self.row, self.attribute)
            }
            ViolationKind::TypeMismatch { expected, found } => write!(
                f,
                "row {}: attribute `{}` expected {expected}, found {found}",
                self.row, self.attribute
            ),
            ViolationKind::MissingRequired => {
                write!(f, "row {}: missing required attribute `{}`", self.row, self.attribute)
            }
            ViolationKind::UnknownRelation => write!(f, "unknown relation `{}`", self.attribute),
            ViolationKind::Rejected { reason } => {
                write!(f, "row {}: `{}` rejected: {reason}", self.row, self.attribute)
            }
        }
    }
}

/// Lists every violation, ordered by row then attribute name. An empty
/// report means the table conforms.
pub fn validate_schema(table: &Table, schema: &Schema) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        for (name, value) in row.iter() {
            match schema.get(name) {
                None => out.push(Violation {
                    row: i,
                    attribute: name.clone(),
                    kind: ViolationKind::UnknownAttribute,
                }),
                Some(spec) if !spec.ty.accepts(value) => out.push(Violation {
                    row: i,
                    attribute: name.clone(),
                    kind: ViolationKind::TypeMismatch {
                        expected: spec.ty.name().to_string(),
                        found: value.type_name().to_string(),
                    },
                }),
                Some(_) => {}
            }
        }
        let mut missing: Vec<&String> = schema
            .iter()
            .filter(|(name, spec)| spec.required && !row.contains(name))
            .map(|(name, _)| name)
            .collect();
        missing.sort();
        out.extend(missing.into_iter().map(|name| Violation {
            row: i,
            attribute: name.clone(),
            kind: ViolationKind::MissingRequired,
        }));
    }
    out
}

/// Renders a report as one violation per line, for LLM retry prompts and
/// error messages.
pub fn render_report(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("- {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}
