use regex::Regex;

use super::{attr_str, input_table, opt_str, str_list, ExecCtx, OpOutcome};
use crate::error::{Error, Result};
use crate::registry::{Attributes, Properties};
use crate::value::{ColumnSpec, DataBatch, DeclaredType, Table, Value};

/// How `extract` finds its value in a string.
#[derive(Debug)]
pub enum Matcher {
    Regex(Regex),
    /// Terms are matched case-insensitively, first listed term wins.
    Dictionary(Vec<String>),
}

impl Matcher {
    pub fn find(&self, text: &str) -> Option<String> {
        match self {
            Matcher::Regex(re) => re.captures(text).map(|c| {
                c.get(1)
                    .or_else(|| c.get(0))
                    .map(|m| m.as_str().to_string())
                    .unwrap_or_default()
            }),
            Matcher::Dictionary(terms) => {
                let hay = text.to_lowercase();
                terms.iter().find(|t| hay.contains(&t.to_lowercase())).cloned()
            }
        }
    }
}

/// Adds attribute `as` to every row of table 0 holding the match found in
/// `column`, or null when there is none or the value is not a string.
pub fn extract(table: &Table, column: &str, matcher: &Matcher, out: &str) -> Table {
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let found = r
                .get(column)
                .and_then(Value::as_str)
                .and_then(|s| matcher.find(s))
                .map(Value::from)
                .unwrap_or(Value::Null);
            let mut r = r.clone();
            r.insert(out, found);
            r
        })
        .collect();
    let schema = table.schema.clone().map(|mut s| {
        s.insert(out.to_string(), ColumnSpec::new(DeclaredType::String));
        s
    });
    Table { rows, schema }
}

pub(crate) fn op_extract(_: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let matcher = match (opt_str(attrs, "pattern"), attrs.contains_key("dictionary")) {
        (Some(p), false) => {
            Matcher::Regex(Regex::new(p).map_err(|e| Error::invalid("attribute `pattern`", e.to_string()))?)
        }
        (None, true) => Matcher::Dictionary(str_list(attrs, "dictionary")?),
        _ => {
            return Err(Error::invalid(
                "extract",
                "exactly one of `pattern` and `dictionary` must be given",
            ))
        }
    };
    let t = extract(
        input_table(input, 0)?,
        attr_str(attrs, "column")?,
        &matcher,
        attr_str(attrs, "as")?,
    );
    Ok(OpOutcome::Done(DataBatch::single(t)))
}
