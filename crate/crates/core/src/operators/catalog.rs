//! The built-in operator catalog.

use std::sync::Arc;

use super::{relational as rel, semantic as sem, text, OperatorImpl};
use crate::registry::{
    AttributeSpec as A, Binding, OperatorDescriptor, OperatorKind, OperatorRegistry, PortRange, Protocol,
    RefinementRule, RefinementTemplate,
};
use crate::value::DeclaredType as T;

fn physical(id: &str, description: &str, ports: PortRange) -> OperatorDescriptor {
    OperatorDescriptor::new(id, OperatorKind::Physical, description, ports)
}

fn llm_props(d: OperatorDescriptor) -> OperatorDescriptor {
    d.prop(
        "max_retries",
        A::optional(T::Integer, "verification retries").range(Some(0.0), None),
    )
    .prop("cache", A::optional(T::Boolean, "use the LLM and node caches"))
    .prop("llm_source", A::optional(T::String, "LLM source to use"))
    .prop("model", A::optional(T::String, "backend model name"))
    .prop("temperature", A::optional(T::Float, "sampling temperature"))
}

/// Descriptors and implementations of every built-in operator, in
/// registration order.
pub fn catalog() -> Vec<(OperatorDescriptor, Option<Arc<dyn OperatorImpl>>)> {
    let imp = |f: fn(
        &super::ExecCtx<'_>,
        &crate::value::DataBatch,
        &crate::registry::Attributes,
        &crate::registry::Properties,
    ) -> crate::error::Result<super::OpOutcome>| { Some(Arc::new(f) as Arc<dyn OperatorImpl>) };
    let p = |s: &str| Binding::Parent(s.into());
    vec![
        (
            physical(
                "project",
                "Restrict table 0 to columns, then rename",
                PortRange::exactly(1),
            )
            .attr("columns", A::required(T::List, "columns to keep, in order"))
            .attr("rename", A::optional(T::Map, "old name to new name")),
            imp(rel::op_project),
        ),
        (
            physical(
                "filter",
                "Rows of table 0 satisfying a predicate",
                PortRange::exactly(1),
            )
            .attr("predicate", A::required(T::String, "predicate expression")),
            imp(rel::op_filter),
        ),
        (
            physical(
                "join",
                "Join table 0 with table 1 on keys and/or a predicate",
                PortRange::exactly(2),
            )
            .attr("left_key", A::optional(T::String, "key attribute of table 0"))
            .attr("right_key", A::optional(T::String, "key attribute of table 1"))
            .attr(
                "predicate",
                A::optional(T::String, "extra condition over t0./t1. attributes"),
            )
            .attr(
                "kind",
                A::optional(T::String, "join kind")
                    .one_of(&["inner", "left"])
                    .with_default("inner"),
            ),
            imp(rel::op_join),
        ),
        (
            physical(
                "in_filter",
                "Rows of table 0 whose key appears in table 1",
                PortRange::exactly(2),
            )
            .attr("key", A::required(T::String, "key attribute of table 0"))
            .attr("member_key", A::required(T::String, "membership attribute of table 1")),
            imp(rel::op_in_filter),
        ),
        (
            physical("union", "Concatenate tables in port order", PortRange::at_least(1)).attr(
                "distinct",
                A::optional(T::Boolean, "drop repeated rows").with_default(false),
            ),
            imp(rel::op_union),
        ),
        (
            physical(
                "sort_limit",
                "Stable sort, then offset and limit",
                PortRange::exactly(1),
            )
            .attr("by", A::optional(T::List, "sort keys {key, desc}"))
            .attr("limit", A::optional(T::Integer, "maximum rows").range(Some(0.0), None))
            .attr(
                "offset",
                A::optional(T::Integer, "rows to skip")
                    .range(Some(0.0), None)
                    .with_default(0),
            ),
            imp(rel::op_sort_limit),
        ),
        (
            physical("group_agg", "Group by keys and aggregate", PortRange::exactly(1))
                .attr("keys", A::optional(T::List, "grouping attributes"))
                .attr("aggs", A::required(T::List, "aggregates {fn, on, as}")),
            imp(rel::op_group_agg),
        ),
        (
            physical("values", "Constant table", PortRange::exactly(0))
                .attr("rows", A::required(T::List, "rows of the table"))
                .attr("schema", A::optional(T::Map, "schema of the table")),
            imp(rel::op_values),
        ),
        (
            physical(
                "sql_scan",
                "Run a native statement on a relational source",
                PortRange::exactly(0),
            )
            .attr("source_id", A::required(T::String, "relational source"))
            .attr("statement", A::required(T::String, "read-only SQL statement")),
            imp(rel::op_sql_scan),
        ),
        (
            physical(
                "extract",
                "Add the regex or dictionary match found in a column",
                PortRange::exactly(1),
            )
            .attr("column", A::required(T::String, "text attribute"))
            .attr("pattern", A::optional(T::String, "regular expression"))
            .attr("dictionary", A::optional(T::List, "terms to look for"))
            .attr("as", A::required(T::String, "output attribute")),
            imp(text::op_extract),
        ),
        (
            OperatorDescriptor::new(
                "extraction",
                OperatorKind::Abstract,
                "Extract a value from text",
                PortRange::exactly(1),
            )
            .attr("column", A::required(T::String, "text attribute"))
            .attr("pattern", A::optional(T::String, "regular expression"))
            .attr("dictionary", A::optional(T::List, "terms to look for"))
            .attr("as", A::required(T::String, "output attribute"))
            .rule(RefinementRule::single(
                "dictionary",
                "extract",
                &[
                    ("column", p("column")),
                    ("dictionary", Binding::Require("dictionary".into())),
                    ("as", p("as")),
                ],
                1,
            ))
            .rule(RefinementRule::single(
                "regex",
                "extract",
                &[
                    ("column", p("column")),
                    ("pattern", Binding::Require("pattern".into())),
                    ("as", p("as")),
                ],
                1,
            )),
            None,
        ),
        (
            llm_props(
                physical(
                    "nl2sql",
                    "Answer a question with generated, verified SQL",
                    PortRange::exactly(0),
                )
                .attr("question", A::required(T::String, "natural-language question"))
                .attr("source_id", A::required(T::String, "relational source"))
                .attr("collection_hint", A::optional(T::String, "table to focus on")),
            ),
            imp(sem::op_nl2sql),
        ),
        (
            llm_props(
                physical("nl2llm", "Answer a question from an LLM", PortRange::exactly(0))
                    .attr("question", A::required(T::String, "natural-language question"))
                    .attr("output_schema", A::optional(T::Map, "schema of the answer"))
                    .attr("source_id", A::required(T::String, "LLM source")),
            ),
            imp(sem::op_nl2llm),
        ),
        (
            physical("nl2u", "Ask the user", PortRange::exactly(0))
                .attr("question", A::required(T::String, "question for the user"))
                .attr("output_schema", A::optional(T::Map, "schema of the answer"))
                .attr("source_id", A::optional(T::String, "user source the answer belongs to"))
                .prop(
                    "ttl_seconds",
                    A::optional(T::Integer, "profile freshness").range(Some(0.0), None),
                )
                .impure(),
            imp(sem::op_nl2u),
        ),
        (
            physical(
                "nl2vec",
                "Nearest neighbours of a question or column values",
                PortRange::between(0, 1),
            )
            .attr("question", A::optional(T::String, "text to embed"))
            .attr(
                "column",
                A::optional(T::String, "embed each value of this attribute of table 0"),
            )
            .attr("source_id", A::required(T::String, "vector source"))
            .attr("collection", A::required(T::String, "collection"))
            .attr(
                "k",
                A::optional(T::Integer, "neighbours per text")
                    .range(Some(1.0), None)
                    .with_default(5),
            ),
            imp(sem::op_nl2vec),
        ),
        (
            llm_props(
                physical(
                    "web_extract",
                    "Extract schema-shaped rows from a web document",
                    PortRange::exactly(0),
                )
                .attr("source_id", A::required(T::String, "web source"))
                .attr("key", A::required(T::String, "URL or fixture key"))
                .attr("output_schema", A::required(T::Map, "schema of the rows")),
            ),
            imp(sem::op_web_extract),
        ),
        (
            llm_props(
                OperatorDescriptor::new(
                    "query_breakdown",
                    OperatorKind::Compound,
                    "Split a question into sub-questions over several sources",
                    PortRange::exactly(0),
                )
                .attr("question", A::required(T::String, "natural-language question"))
                .attr("source_ids", A::required(T::List, "candidate sources"))
                .rule(RefinementRule {
                    rule_id: "breakdown".into(),
                    produces: RefinementTemplate::Breakdown,
                }),
            ),
            imp(sem::op_query_breakdown),
        ),
        (
            OperatorDescriptor::new(
                "question_answer",
                OperatorKind::Abstract,
                "Answer a natural-language question",
                PortRange::exactly(0),
            )
            .attr("question", A::required(T::String, "natural-language question"))
            .attr("output_schema", A::optional(T::Map, "schema of the answer"))
            .attr("source_ids", A::optional(T::List, "sources the answer may use"))
            .rule(RefinementRule::single(
                "nl2sql",
                "nl2sql",
                &[
                    ("question", p("question")),
                    ("source_id", Binding::SelectSource(Protocol::Relational)),
                ],
                0,
            ))
            .rule(RefinementRule::single(
                "nl2llm",
                "nl2llm",
                &[
                    ("question", p("question")),
                    ("output_schema", p("output_schema")),
                    ("source_id", Binding::SelectSource(Protocol::Llm)),
                ],
                0,
            ))
            .rule(RefinementRule::single(
                "query_breakdown",
                "query_breakdown",
                &[("question", p("question")), ("source_ids", Binding::CandidateSources)],
                0,
            )),
            None,
        ),
    ]
}

/// A registry holding the built-in catalog.
pub fn bootstrap() -> OperatorRegistry {
    let reg = OperatorRegistry::new();
    for (d, imp) in catalog() {
        reg.register_operator(d, imp).expect("built-in catalog is valid");
    }
    reg
}

/// Implementation of a built-in operator, for rebinding persisted
/// descriptors.
pub fn builtin_impl(operator_id: &str) -> Option<Arc<dyn OperatorImpl>> {
    catalog()
        .into_iter()
        .find(|(d, _)| d.operator_id == operator_id)
        .and_then(|(_, i)| i)
}
