//! Natural-language operators: each turns a sub-question into a query
//! against one source and returns schema-shaped rows.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use sqlparser::ast::{Expr as SqlExpr, ObjectNamePart, SelectItem, Statement, TableFactor, Visit, Visitor};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use super::{attr_str, input_table, opt_i64, opt_str, schema_attr, str_list, ExecCtx, OpOutcome};
use crate::error::{Error, Result};
use crate::registry::{embed, Attributes, Level, MetadataEntry, Properties, Protocol};
use crate::schema::{Violation, ViolationKind};
use crate::session::DEFAULT_NAMESPACE;
use crate::sources::llm::{normalize_whitespace, prompts, render_prompt};
use crate::sources::{SourceManager, UserOutcome};
use crate::value::{schema_of, ColumnSpec, DataBatch, DeclaredType, Row, Schema, Table, Value};

fn done(t: Table) -> Result<OpOutcome> {
    Ok(OpOutcome::Done(DataBatch::single(t)))
}

fn rejected(row: usize, attribute: &str, reason: impl Into<String>) -> Violation {
    Violation {
        row,
        attribute: attribute.to_string(),
        kind: ViolationKind::Rejected { reason: reason.into() },
    }
}

/// Names a generated statement may use.
#[derive(Clone, Debug, Default)]
pub struct SqlCatalog {
    pub relations: BTreeSet<String>,
    pub attributes: BTreeSet<String>,
}

impl SqlCatalog {
    fn from_entries(entries: &[MetadataEntry]) -> Self {
        let mut c = SqlCatalog::default();
        for e in entries {
            match e.level {
                Level::Collection => {
                    c.relations.insert(e.name().to_lowercase());
                }
                Level::Attribute => {
                    c.attributes.insert(e.name().to_lowercase());
                }
                _ => {}
            }
        }
        c
    }

    /// Registry metadata of the source, or a fresh scan when it has never
    /// been synced.
    pub fn for_source(sources: &SourceManager, source_id: &str) -> Result<(Self, Vec<MetadataEntry>)> {
        let mut entries = sources.registry().subtree(source_id);
        if !entries.iter().any(|e| e.level == Level::Collection) {
            entries = sources.relational(source_id)?.collect_metadata()?;
        }
        Ok((Self::from_entries(&entries), entries))
    }
}

#[derive(Default)]
struct NameCollector {
    relations: Vec<String>,
    idents: Vec<String>,
    local: BTreeSet<String>,
}

fn lower(i: &sqlparser::ast::Ident) -> String {
    i.value.to_lowercase()
}

impl Visitor for NameCollector {
    type Break = ();

    fn pre_visit_query(&mut self, q: &sqlparser::ast::Query) -> ControlFlow<()> {
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                self.local.insert(lower(&cte.alias.name));
                for c in &cte.alias.columns {
                    self.local.insert(lower(&c.name));
                }
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, s: &sqlparser::ast::Select) -> ControlFlow<()> {
        for item in &s.projection {
            if let SelectItem::ExprWithAlias { alias, .. } = item {
                self.local.insert(lower(alias));
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_table_factor(&mut self, t: &TableFactor) -> ControlFlow<()> {
        let alias = match t {
            TableFactor::Table { alias, .. } | TableFactor::Derived { alias, .. } => alias.as_ref(),
            _ => None,
        };
        if let Some(a) = alias {
            self.local.insert(lower(&a.name));
            for c in &a.columns {
                self.local.insert(lower(&c.name));
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, r: &sqlparser::ast::ObjectName) -> ControlFlow<()> {
        if let Some(ObjectNamePart::Identifier(i)) = r.0.last() {
            self.relations.push(lower(i));
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, e: &SqlExpr) -> ControlFlow<()> {
        match e {
            SqlExpr::Identifier(i) => self.idents.push(lower(i)),
            SqlExpr::CompoundIdentifier(parts) => {
                if let Some(i) = parts.last() {
                    self.idents.push(lower(i));
                }
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

/// Checks that `sql` is one read-only query naming only known relations and
/// attributes (CTE names, table aliases and projection aliases are allowed).
pub fn verify_sql(sql: &str, catalog: &SqlCatalog) -> Vec<Violation> {
    let stmts = match Parser::parse_sql(&SQLiteDialect {}, sql) {
        Ok(s) => s,
        Err(e) => return vec![rejected(0, "sql", format!("does not parse: {e}"))],
    };
    let stmt = match stmts.as_slice() {
        [s] => s,
        _ => {
            return vec![rejected(
                0,
                "sql",
                format!("expected one statement, got {}", stmts.len()),
            )]
        }
    };
    if !matches!(stmt, Statement::Query(_)) {
        return vec![rejected(0, "sql", "not a read-only query")];
    }
    let mut names = NameCollector::default();
    let _ = stmt.visit(&mut names);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &names.relations {
        if !catalog.relations.contains(r) && !names.local.contains(r) && seen.insert(r.clone()) {
            out.push(Violation {
                row: 0,
                attribute: r.clone(),
                kind: ViolationKind::UnknownRelation,
            });
        }
    }
    for i in &names.idents {
        if !catalog.attributes.contains(i) && !names.local.contains(i) && seen.insert(i.clone()) {
            out.push(Violation {
                row: 0,
                attribute: i.clone(),
                kind: ViolationKind::UnknownAttribute,
            });
        }
    }
    out
}

fn describe_tables(entries: &[MetadataEntry], hint: Option<&str>) -> String {
    let mut lines = Vec::new();
    for c in entries.iter().filter(|e| e.level == Level::Collection) {
        if hint.is_some_and(|h| !h.eq_ignore_ascii_case(c.name())) {
            continue;
        }
        let cols: Vec<String> = entries
            .iter()
            .filter(|a| a.level == Level::Attribute && a.path.len() == 4 && a.path[2] == c.name())
            .map(|a| {
                let ty = a.data_type.map(|t| t.name()).unwrap_or("any");
                let samples: Vec<String> = a.samples.iter().take(3).map(Value::to_string).collect();
                format!("  {} {ty} e.g. {}", a.name(), samples.join(", "))
            })
            .collect();
        lines.push(format!("{}:\n{}", c.name(), cols.join("\n")));
    }
    lines.join("\n")
}

/// Generates SQL for `question` through the LLM, verifies it against the
/// source's metadata (retrying with the violations), and executes it.
pub fn nl2sql(
    sources: &SourceManager,
    question: &str,
    source_id: &str,
    collection_hint: Option<&str>,
    props: &Properties,
) -> Result<Table> {
    let (catalog, entries) = SqlCatalog::for_source(sources, source_id)?;
    let schema: Schema = [("sql".to_string(), ColumnSpec::new(DeclaredType::String).required())]
        .into_iter()
        .collect();
    let prompt = render_prompt(
        prompts::NL2SQL,
        &normalize_whitespace(question),
        &describe_tables(&entries, collection_hint),
        &schema,
    );
    let verify = |t: &Table| -> Vec<Violation> {
        match t.rows.as_slice() {
            [r] => match r.get("sql").and_then(Value::as_str) {
                Some(sql) => verify_sql(sql, &catalog),
                None => vec![rejected(0, "sql", "missing statement")],
            },
            rows => vec![rejected(
                0,
                "sql",
                format!("expected one statement row, got {}", rows.len()),
            )],
        }
    };
    let llm = sources.llm_for(props)?;
    let reply = llm.complete_verified(&prompt, &schema, props, Some(&verify))?;
    let sql = reply.rows[0].get("sql").and_then(Value::as_str).unwrap_or_default();
    tracing::debug!(%source_id, %sql, "nl2sql statement");
    sources.query_relational(source_id, sql)
}

pub const INTEGRATIONS: &[&str] = &["join", "in", "union"];

/// Reply schema of the breakdown call.
pub fn breakdown_schema() -> Schema {
    let mut s = schema_of([
        ("sub_question", DeclaredType::String),
        ("target", DeclaredType::String),
        ("integrate", DeclaredType::String),
        ("key", DeclaredType::String),
        ("predicate", DeclaredType::String),
        ("output_schema", DeclaredType::Map),
    ]);
    s["sub_question"].required = true;
    s["target"].required = true;
    s
}

fn verify_breakdown(t: &Table, source_ids: &[String]) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        match r.get("target").and_then(Value::as_str) {
            Some(tg) if source_ids.iter().any(|s| s == tg) => {}
            Some(tg) => out.push(rejected(
                i,
                "target",
                format!("`{tg}` is not one of the candidate sources"),
            )),
            None => out.push(rejected(i, "target", "missing")),
        }
        if r.get("sub_question")
            .and_then(Value::as_str)
            .is_none_or(|q| q.trim().is_empty())
        {
            out.push(rejected(i, "sub_question", "empty"));
        }
        let integrate = r.get("integrate").and_then(Value::as_str);
        match integrate {
            Some(m) if !INTEGRATIONS.contains(&m) => {
                out.push(rejected(i, "integrate", format!("`{m}` is not one of join, in, union")))
            }
            None if i > 0 => out.push(rejected(i, "integrate", "required after the first row")),
            _ => {}
        }
        if i > 0 && integrate == Some("in") && r.get("key").and_then(Value::as_str).is_none() {
            out.push(rejected(i, "key", "`in` needs a key"));
        }
        if let Some(p) = r.get("predicate").and_then(Value::as_str) {
            if let Err(e) = crate::expr::parse_expression(p) {
                out.push(rejected(i, "predicate", e.to_string()));
            }
        }
        if let Some(s) = r.get("output_schema").filter(|v| !v.is_null()) {
            if serde_json::from_value::<Schema>(s.to_json()).is_err() {
                out.push(rejected(i, "output_schema", "not a schema"));
            }
        }
    }
    out
}

fn describe_sources(sources: &SourceManager, ids: &[String]) -> String {
    let reg = sources.registry();
    ids.iter()
        .map(|id| {
            let (proto, desc) = reg
                .source(id)
                .map(|d| (d.protocol.as_str(), d.description))
                .unwrap_or(("unknown", String::new()));
            let collections: Vec<String> = reg.collections(id).iter().map(|c| c.name().to_string()).collect();
            let mut line = format!("- {id} ({proto})");
            if !desc.is_empty() {
                line.push_str(&format!(": {desc}"));
            }
            if !collections.is_empty() {
                line.push_str(&format!(" [collections: {}]", collections.join(", ")));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the LLM to split `question` into sub-questions over `source_ids`.
pub fn query_breakdown(
    sources: &SourceManager,
    question: &str,
    source_ids: &[String],
    props: &Properties,
) -> Result<Table> {
    let schema = breakdown_schema();
    let prompt = render_prompt(
        prompts::QUERY_BREAKDOWN,
        &normalize_whitespace(question),
        &describe_sources(sources, source_ids),
        &schema,
    );
    let verify = |t: &Table| verify_breakdown(t, source_ids);
    sources
        .llm_for(props)?
        .complete_verified(&prompt, &schema, props, Some(&verify))
}

/// Embeds the question, or each input row's `column` value, and unions the
/// nearest neighbours keeping the first occurrence of each item.
pub fn nl2vec(
    sources: &SourceManager,
    input: Option<&Table>,
    question: Option<&str>,
    column: Option<&str>,
    source_id: &str,
    collection: &str,
    k: usize,
) -> Result<Table> {
    let texts: Vec<String> = match (question, column) {
        (Some(q), None) => vec![q.to_string()],
        (None, Some(c)) => input
            .map(|t| {
                t.rows
                    .iter()
                    .filter_map(|r| r.get(c).filter(|v| !v.is_null()))
                    .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
                    .collect()
            })
            .unwrap_or_default(),
        _ => {
            return Err(Error::invalid(
                "nl2vec",
                "exactly one of `question` and `column` must be given",
            ))
        }
    };
    let mut seen: BTreeSet<Row> = BTreeSet::new();
    let mut rows = Vec::new();
    for text in texts {
        for r in sources.query_vector(source_id, collection, &embed(&text), k)?.rows {
            let mut ident = r.clone();
            ident.remove("_score");
            if seen.insert(ident) {
                rows.push(r);
            }
        }
    }
    Ok(Table::new(rows))
}

pub(crate) fn op_nl2sql(ctx: &ExecCtx<'_>, _: &DataBatch, attrs: &Attributes, props: &Properties) -> Result<OpOutcome> {
    done(nl2sql(
        ctx.sources,
        attr_str(attrs, "question")?,
        attr_str(attrs, "source_id")?,
        opt_str(attrs, "collection_hint"),
        props,
    )?)
}

pub(crate) fn op_nl2llm(ctx: &ExecCtx<'_>, _: &DataBatch, attrs: &Attributes, props: &Properties) -> Result<OpOutcome> {
    let schema = schema_attr(attrs, "output_schema")?;
    done(ctx.sources.llm_query(
        attr_str(attrs, "source_id")?,
        attr_str(attrs, "question")?,
        schema.as_ref(),
        props,
    )?)
}

pub(crate) fn op_nl2u(ctx: &ExecCtx<'_>, _: &DataBatch, attrs: &Attributes, props: &Properties) -> Result<OpOutcome> {
    let session = ctx
        .session
        .ok_or_else(|| Error::invalid("nl2u", "asking the user needs a session"))?;
    let schema = schema_attr(attrs, "output_schema")?;
    let ttl = props.get("ttl_seconds").and_then(Value::as_i64);
    match ctx
        .sources
        .users()
        .user_query(session, attr_str(attrs, "question")?, schema.as_ref(), ttl, ctx.node_id)?
    {
        UserOutcome::Answered(t) => done(t),
        UserOutcome::Prompted { prompt_id } => Ok(OpOutcome::Suspended { prompt_id }),
    }
}

pub(crate) fn op_nl2vec(ctx: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let k = opt_i64(attrs, "k").unwrap_or(5).max(0) as usize;
    let table = if input.tables.is_empty() {
        None
    } else {
        Some(input_table(input, 0)?)
    };
    done(nl2vec(
        ctx.sources,
        table,
        opt_str(attrs, "question"),
        opt_str(attrs, "column"),
        attr_str(attrs, "source_id")?,
        attr_str(attrs, "collection")?,
        k,
    )?)
}

pub(crate) fn op_query_breakdown(
    ctx: &ExecCtx<'_>,
    _: &DataBatch,
    attrs: &Attributes,
    props: &Properties,
) -> Result<OpOutcome> {
    done(query_breakdown(
        ctx.sources,
        attr_str(attrs, "question")?,
        &str_list(attrs, "source_ids")?,
        props,
    )?)
}

pub(crate) fn op_web_extract(
    ctx: &ExecCtx<'_>,
    _: &DataBatch,
    attrs: &Attributes,
    props: &Properties,
) -> Result<OpOutcome> {
    let schema = schema_attr(attrs, "output_schema")?
        .ok_or_else(|| Error::invalid("web_extract", "`output_schema` is required"))?;
    done(
        ctx.sources
            .web_extract(attr_str(attrs, "source_id")?, attr_str(attrs, "key")?, &schema, props)?,
    )
}

/// Namespace used when an operator runs outside a session.
pub fn namespace_of(ctx: &ExecCtx<'_>) -> String {
    ctx.session
        .map(|s| s.namespace.clone())
        .unwrap_or_else(|| DEFAULT_NAMESPACE.to_string())
}

/// Whether a source id names a registered source of `protocol`.
pub fn has_protocol(sources: &SourceManager, id: &str, protocol: Protocol) -> bool {
    sources.registry().source(id).is_some_and(|d| d.protocol == protocol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> SqlCatalog {
        SqlCatalog {
            relations: ["jobs".to_string()].into(),
            attributes: ["id", "title", "salary", "location", "company"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    #[test]
    fn accepts_known_names_and_aliases() {
        let c = catalog();
        assert!(verify_sql("SELECT * FROM jobs WHERE title LIKE '%Data Scientist%'", &c).is_empty());
        assert!(verify_sql("SELECT j.title AS t FROM jobs j ORDER BY t", &c).is_empty());
        assert!(verify_sql("WITH x AS (SELECT salary FROM jobs) SELECT salary FROM x", &c).is_empty());
        assert!(verify_sql("SELECT count(*) AS n FROM jobs", &c).is_empty());
    }

    #[test]
    fn rejects_unknown_names_and_writes() {
        let c = catalog();
        let v = verify_sql("SELECT * FROM people", &c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::UnknownRelation);
        let v = verify_sql("SELECT wage FROM jobs", &c);
        assert_eq!(v[0].kind, ViolationKind::UnknownAttribute);
        assert!(matches!(
            verify_sql("DELETE FROM jobs", &c)[0].kind,
            ViolationKind::Rejected { .. }
        ));
        assert!(matches!(
            verify_sql("SELECT 1; SELECT 2", &c)[0].kind,
            ViolationKind::Rejected { .. }
        ));
    }
}
