//! Operator catalog. Every operator has the signature
//! `output = op(input, attributes, properties)` over [`DataBatch`].

pub mod catalog;
pub mod relational;
pub mod semantic;
pub mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Attributes, OperatorKind, OperatorRegistry, Properties};
use crate::session::Session;
use crate::sources::SourceManager;
use crate::value::{DataBatch, Schema, Table, Value};

pub use catalog::bootstrap;

/// Result of one invocation. Only `nl2u` ever suspends.
#[derive(Clone, Debug, PartialEq)]
pub enum OpOutcome {
    Done(DataBatch),
    Suspended { prompt_id: String },
}

impl OpOutcome {
    pub fn into_batch(self) -> Result<DataBatch> {
        match self {
            OpOutcome::Done(b) => Ok(b),
            OpOutcome::Suspended { prompt_id } => Err(Error::Internal(format!(
                "operator suspended on prompt `{prompt_id}` where a result was required"
            ))),
        }
    }
}

/// What an operator may touch besides its input.
#[derive(Clone, Copy)]
pub struct ExecCtx<'a> {
    pub sources: &'a SourceManager,
    pub session: Option<&'a Session>,
    pub node_id: Option<&'a str>,
}

impl<'a> ExecCtx<'a> {
    pub fn new(sources: &'a SourceManager) -> Self {
        ExecCtx {
            sources,
            session: None,
            node_id: None,
        }
    }

    pub fn with_session(mut self, session: &'a Session) -> Self {
        self.session = Some(session);
        self
    }

    pub fn with_node(mut self, node_id: &'a str) -> Self {
        self.node_id = Some(node_id);
        self
    }
}

pub trait OperatorImpl: Send + Sync {
    /// `attrs` have already been validated and defaulted.
    fn invoke(&self, ctx: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, props: &Properties)
        -> Result<OpOutcome>;
}

impl<F> OperatorImpl for F
where
    F: Fn(&ExecCtx<'_>, &DataBatch, &Attributes, &Properties) -> Result<OpOutcome> + Send + Sync,
{
    fn invoke(
        &self,
        ctx: &ExecCtx<'_>,
        input: &DataBatch,
        attrs: &Attributes,
        props: &Properties,
    ) -> Result<OpOutcome> {
        self(ctx, input, attrs, props)
    }
}

/// The plan-node payload: an operator call with its input batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorInvocation {
    pub operator_id: String,
    #[serde(default)]
    pub input: DataBatch,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(default)]
    pub properties: Properties,
}

impl OperatorInvocation {
    pub fn new(operator_id: &str, input: DataBatch, attributes: Attributes) -> Self {
        OperatorInvocation {
            operator_id: operator_id.to_string(),
            input,
            attributes,
            properties: Properties::new(),
        }
    }
}

/// Validates an invocation against its descriptor and runs the bound
/// implementation.
pub fn invoke(registry: &OperatorRegistry, ctx: &ExecCtx<'_>, inv: &OperatorInvocation) -> Result<OpOutcome> {
    let d = registry.descriptor(&inv.operator_id)?;
    if d.kind == OperatorKind::Abstract {
        return Err(Error::AbstractOperator(d.operator_id));
    }
    if !d.input_ports.contains(inv.input.tables.len()) {
        return Err(Error::Arity {
            operator: d.operator_id,
            expected: d.input_ports.to_string(),
            got: inv.input.tables.len(),
        });
    }
    let attrs = d
        .validate_attributes(&inv.attributes)
        .map_err(|problems| Error::invalid(format!("attributes of `{}`", d.operator_id), problems.join("; ")))?;
    let imp = registry
        .implementation(&d.operator_id)
        .ok_or_else(|| Error::AbstractOperator(d.operator_id.clone()))?;
    imp.invoke(ctx, &inv.input, &attrs, &inv.properties)
}

/// Runs a physical operator with no session and no sources; for the pure
/// relational and text operators.
pub fn invoke_pure(operator_id: &str, input: DataBatch, attributes: Attributes) -> Result<DataBatch> {
    thread_local! {
        static PURE: (OperatorRegistry, SourceManager) = (bootstrap(), SourceManager::offline());
    }
    PURE.with(|(reg, sources)| {
        invoke(
            reg,
            &ExecCtx::new(sources),
            &OperatorInvocation::new(operator_id, input, attributes),
        )?
        .into_batch()
    })
}

pub(crate) fn input_table(input: &DataBatch, port: usize) -> Result<&Table> {
    input
        .table(port)
        .ok_or_else(|| Error::Internal(format!("missing input table on port {port}")))
}

pub(crate) fn attr_str<'a>(attrs: &'a Attributes, name: &str) -> Result<&'a str> {
    attrs
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::invalid(format!("attribute `{name}`"), "expected a string"))
}

pub(crate) fn opt_str<'a>(attrs: &'a Attributes, name: &str) -> Option<&'a str> {
    attrs.get(name).and_then(Value::as_str)
}

pub(crate) fn opt_i64(attrs: &Attributes, name: &str) -> Option<i64> {
    attrs.get(name).and_then(Value::as_i64)
}

pub(crate) fn str_list(attrs: &Attributes, name: &str) -> Result<Vec<String>> {
    match attrs.get(name) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::List(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::invalid(format!("attribute `{name}`"), "expected a list of strings"))
            })
            .collect(),
        Some(_) => Err(Error::invalid(
            format!("attribute `{name}`"),
            "expected a list of strings",
        )),
    }
}

/// Reads an attribute holding a schema map (`{name: type | {type, ...}}`).
pub fn schema_attr(attrs: &Attributes, name: &str) -> Result<Option<Schema>> {
    match attrs.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.to_json())
            .map(Some)
            .map_err(|e| Error::invalid(format!("attribute `{name}`"), format!("not a schema: {e}"))),
    }
}
