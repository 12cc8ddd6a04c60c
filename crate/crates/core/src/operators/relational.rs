//! Relational operators over the tables of a batch.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Deserialize;

use super::{attr_str, input_table, opt_i64, opt_str, str_list, ExecCtx, OpOutcome};
use crate::error::{Error, Result};
use crate::expr::{parse_expression, Expr};
use crate::registry::{Attributes, Properties};
use crate::value::{ColumnSpec, DataBatch, DeclaredType, Row, Schema, Table, Value};

fn done(t: Table) -> Result<OpOutcome> {
    Ok(OpOutcome::Done(DataBatch::single(t)))
}

/// Columns of table 0 in the given order, missing ones as null, then renamed.
pub fn project(table: &Table, columns: &[String], rename: &BTreeMap<String, String>) -> Result<Table> {
    let out_names: Vec<String> = columns
        .iter()
        .map(|c| rename.get(c).cloned().unwrap_or_else(|| c.clone()))
        .collect();
    let unique: BTreeSet<&String> = out_names.iter().collect();
    if unique.len() != out_names.len() || out_names.iter().any(String::is_empty) {
        return Err(Error::invalid(
            "project",
            format!("output columns {out_names:?} are empty or repeated"),
        ));
    }
    let rows = table
        .rows
        .iter()
        .map(|r| {
            columns
                .iter()
                .zip(&out_names)
                .map(|(c, n)| (n.clone(), r.get(c).cloned().unwrap_or(Value::Null)))
                .collect()
        })
        .collect();
    let schema = table.schema.as_ref().map(|s| {
        columns
            .iter()
            .zip(&out_names)
            .map(|(c, n)| {
                (
                    n.clone(),
                    s.get(c).cloned().unwrap_or(ColumnSpec::new(DeclaredType::Any)),
                )
            })
            .collect::<Schema>()
    });
    Ok(Table { rows, schema })
}

pub fn filter(table: &Table, predicate: &Expr) -> Table {
    Table {
        rows: table.rows.iter().filter(|r| predicate.test(&[r])).cloned().collect(),
        schema: table.schema.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinKind {
    Inner,
    Left,
}

/// How the right side's attributes are named in the merged row: names
/// already used by the left table (or by an earlier right column, in sorted
/// order) get `r_` prefixes until unique.
pub fn right_names(left_cols: &BTreeSet<String>, right_cols: &BTreeSet<String>) -> BTreeMap<String, String> {
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut out = BTreeMap::new();
    for c in right_cols {
        let mut n = c.clone();
        while left_cols.contains(&n) || used.contains(&n) {
            n = format!("r_{n}");
        }
        used.insert(n.clone());
        out.insert(c.clone(), n);
    }
    out
}

fn column_set(t: &Table) -> BTreeSet<String> {
    t.columns().into_iter().collect()
}

pub struct JoinSpec<'a> {
    pub keys: Option<(&'a str, &'a str)>,
    pub predicate: Option<&'a Expr>,
    pub kind: JoinKind,
}

/// Equality join on keys (numeric-normalized, null never matches), optionally
/// restricted by a predicate over `t0.`/`t1.` attributes. With neither keys
/// nor predicate it is a cross product. Output follows left order, then
/// right order among matches.
pub fn join(left: &Table, right: &Table, spec: &JoinSpec<'_>) -> Table {
    let names = right_names(&column_set(left), &column_set(right));
    let mut index: Option<HashMap<Value, Vec<usize>>> = None;
    if let Some((_, rk)) = spec.keys {
        let mut m: HashMap<Value, Vec<usize>> = HashMap::new();
        for (i, r) in right.rows.iter().enumerate() {
            if let Some(k) = r.get(rk).and_then(Value::join_key) {
                m.entry(k).or_default().push(i);
            }
        }
        index = Some(m);
    }
    let all: Vec<usize> = (0..right.rows.len()).collect();
    let mut rows = Vec::new();
    for l in &left.rows {
        let candidates: &[usize] = match (&index, spec.keys) {
            (Some(m), Some((lk, _))) => match l.get(lk).and_then(Value::join_key) {
                Some(k) => m.get(&k).map(Vec::as_slice).unwrap_or(&[]),
                None => &[],
            },
            _ => &all,
        };
        let mut matched = false;
        for &i in candidates {
            let r = &right.rows[i];
            if spec.predicate.is_some_and(|p| !p.test(&[l, r])) {
                continue;
            }
            matched = true;
            let mut merged = l.clone();
            for (k, v) in r.iter() {
                merged.insert(names[k].clone(), v.clone());
            }
            rows.push(merged);
        }
        if !matched && spec.kind == JoinKind::Left {
            let mut merged = l.clone();
            for n in names.values() {
                merged.insert(n.clone(), Value::Null);
            }
            rows.push(merged);
        }
    }
    let schema = match (&left.schema, &right.schema) {
        (Some(ls), Some(rs)) => {
            let mut s = ls.clone();
            for (k, spec) in rs {
                s.insert(names[k].clone(), spec.clone());
            }
            Some(s)
        }
        _ => None,
    };
    Table { rows, schema }
}

/// Semi-join: rows of `left` whose key appears in `members`' member_key.
pub fn in_filter(left: &Table, members: &Table, key: &str, member_key: &str) -> Table {
    let set: HashSet<Value> = members
        .rows
        .iter()
        .filter_map(|r| r.get(member_key).and_then(Value::join_key))
        .collect();
    Table {
        rows: left
            .rows
            .iter()
            .filter(|r| r.get(key).and_then(Value::join_key).is_some_and(|k| set.contains(&k)))
            .cloned()
            .collect(),
        schema: left.schema.clone(),
    }
}

/// Concatenation in port order; `distinct` keeps the first of equal rows.
pub fn union(tables: &[Table], distinct: bool) -> Table {
    let mut seen: HashSet<&Row> = HashSet::new();
    let mut rows = Vec::new();
    for t in tables {
        for r in &t.rows {
            if !distinct || seen.insert(r) {
                rows.push(r.clone());
            }
        }
    }
    let schema = match tables.first().map(|t| &t.schema) {
        Some(Some(s)) if tables.iter().all(|t| t.schema.as_ref() == Some(s)) => Some(s.clone()),
        _ => None,
    };
    Table { rows, schema }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct SortKey {
    pub key: String,
    #[serde(default)]
    pub desc: bool,
}

/// Stable multi-key sort, nulls (and missing attributes) first in either
/// direction, then offset and limit.
pub fn sort_limit(table: &Table, by: &[SortKey], limit: Option<usize>, offset: usize) -> Table {
    let mut rows = table.rows.clone();
    rows.sort_by(|a, b| {
        for k in by {
            let va = a.get(&k.key).unwrap_or(&Value::Null);
            let vb = b.get(&k.key).unwrap_or(&Value::Null);
            let ord = match (va.is_null(), vb.is_null()) {
                (true, true) => Ordering::Equal,
                (true, false) => Ordering::Less,
                (false, true) => Ordering::Greater,
                (false, false) if k.desc => vb.cmp(va),
                (false, false) => va.cmp(vb),
            };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    });
    let rows = rows
        .into_iter()
        .skip(offset)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    Table {
        rows,
        schema: table.schema.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Count,
    Sum,
    Min,
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct Agg {
    #[serde(rename = "fn")]
    pub func: AggFn,
    #[serde(default)]
    pub on: Option<String>,
    #[serde(rename = "as")]
    pub alias: String,
}

fn aggregate(func: AggFn, rows: &[&Row], on: Option<&str>) -> Value {
    if func == AggFn::Count {
        return Value::Int(rows.len() as i64);
    }
    let vals: Vec<&Value> = rows
        .iter()
        .filter_map(|r| on.and_then(|c| r.get(c)))
        .filter(|v| !v.is_null())
        .collect();
    match func {
        AggFn::Count => unreachable!(),
        AggFn::Min => vals.iter().min().map(|v| (*v).clone()).unwrap_or(Value::Null),
        AggFn::Max => vals.iter().max().map(|v| (*v).clone()).unwrap_or(Value::Null),
        AggFn::Sum | AggFn::Avg => {
            let nums: Vec<&Value> = vals.into_iter().filter(|v| v.is_number()).collect();
            if nums.is_empty() {
                return Value::Null;
            }
            if func == AggFn::Avg {
                let total: f64 = nums.iter().filter_map(|v| v.as_f64()).sum();
                return Value::float(total / nums.len() as f64).unwrap_or(Value::Null);
            }
            let ints: Option<Vec<i64>> = nums
                .iter()
                .map(|v| match v {
                    Value::Int(i) => Some(*i),
                    _ => None,
                })
                .collect();
            if let Some(s) = ints.and_then(|is| is.into_iter().try_fold(0i64, |a, b| a.checked_add(b))) {
                return Value::Int(s);
            }
            let total: f64 = nums.iter().filter_map(|v| v.as_f64()).sum();
            Value::float(total).unwrap_or(Value::Null)
        }
    }
}

/// One row per distinct key tuple, in order of first appearance. Nulls are
/// skipped by sum/min/max/avg; count counts rows; integer sums stay
/// integers unless they overflow.
pub fn group_agg(table: &Table, keys: &[String], aggs: &[Agg]) -> Table {
    let mut order: Vec<Vec<Value>> = Vec::new();
    let mut groups: HashMap<Vec<Value>, Vec<&Row>> = HashMap::new();
    for r in &table.rows {
        let k: Vec<Value> = keys.iter().map(|c| r.get(c).cloned().unwrap_or(Value::Null)).collect();
        let g = groups.entry(k.clone()).or_default();
        if g.is_empty() {
            order.push(k);
        }
        g.push(r);
    }
    let rows = order
        .into_iter()
        .map(|k| {
            let members = &groups[&k];
            let mut row: Row = keys.iter().cloned().zip(k.iter().cloned()).collect();
            for a in aggs {
                row.insert(a.alias.clone(), aggregate(a.func, members, a.on.as_deref()));
            }
            row
        })
        .collect();
    Table::new(rows)
}

fn parse_list<T: for<'de> Deserialize<'de>>(attrs: &Attributes, name: &str) -> Result<Vec<T>> {
    match attrs.get(name) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(v) => serde_json::from_value(v.to_json())
            .map_err(|e| Error::invalid(format!("attribute `{name}`"), e.to_string())),
    }
}

pub(crate) fn op_project(_: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let columns = str_list(attrs, "columns")?;
    let rename: BTreeMap<String, String> = match attrs.get("rename") {
        Some(Value::Map(m)) => m
            .iter()
            .map(|(k, v)| {
                v.as_str()
                    .map(|s| (k.clone(), s.to_string()))
                    .ok_or_else(|| Error::invalid("attribute `rename`", "values must be strings"))
            })
            .collect::<Result<_>>()?,
        _ => BTreeMap::new(),
    };
    done(project(input_table(input, 0)?, &columns, &rename)?)
}

pub(crate) fn op_filter(_: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let p = parse_expression(attr_str(attrs, "predicate")?)?;
    done(filter(input_table(input, 0)?, &p))
}

pub(crate) fn op_join(_: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let keys = match (opt_str(attrs, "left_key"), opt_str(attrs, "right_key")) {
        (Some(l), Some(r)) => Some((l, r)),
        (None, None) => None,
        _ => return Err(Error::invalid("join", "left_key and right_key must be given together")),
    };
    let predicate = opt_str(attrs, "predicate").map(parse_expression).transpose()?;
    let kind = match opt_str(attrs, "kind").unwrap_or("inner") {
        "left" => JoinKind::Left,
        _ => JoinKind::Inner,
    };
    let spec = JoinSpec {
        keys,
        predicate: predicate.as_ref(),
        kind,
    };
    done(join(input_table(input, 0)?, input_table(input, 1)?, &spec))
}

pub(crate) fn op_in_filter(
    _: &ExecCtx<'_>,
    input: &DataBatch,
    attrs: &Attributes,
    _: &Properties,
) -> Result<OpOutcome> {
    done(in_filter(
        input_table(input, 0)?,
        input_table(input, 1)?,
        attr_str(attrs, "key")?,
        attr_str(attrs, "member_key")?,
    ))
}

pub(crate) fn op_union(_: &ExecCtx<'_>, input: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let distinct = attrs.get("distinct").and_then(Value::as_bool).unwrap_or(false);
    done(union(&input.tables, distinct))
}

pub(crate) fn op_sort_limit(
    _: &ExecCtx<'_>,
    input: &DataBatch,
    attrs: &Attributes,
    _: &Properties,
) -> Result<OpOutcome> {
    let by: Vec<SortKey> = parse_list(attrs, "by")?;
    let limit = opt_i64(attrs, "limit").map(|l| l.max(0) as usize);
    let offset = opt_i64(attrs, "offset").unwrap_or(0).max(0) as usize;
    done(sort_limit(input_table(input, 0)?, &by, limit, offset))
}

pub(crate) fn op_group_agg(
    _: &ExecCtx<'_>,
    input: &DataBatch,
    attrs: &Attributes,
    _: &Properties,
) -> Result<OpOutcome> {
    let keys = str_list(attrs, "keys")?;
    let aggs: Vec<Agg> = parse_list(attrs, "aggs")?;
    for a in &aggs {
        if a.func != AggFn::Count && a.on.is_none() {
            return Err(Error::invalid("attribute `aggs`", format!("`{}` needs `on`", a.alias)));
        }
    }
    done(group_agg(input_table(input, 0)?, &keys, &aggs))
}

pub(crate) fn op_values(_: &ExecCtx<'_>, _: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    let rows: Vec<Row> = parse_list(attrs, "rows")?;
    let schema = super::schema_attr(attrs, "schema")?;
    done(Table { rows, schema })
}

pub(crate) fn op_sql_scan(ctx: &ExecCtx<'_>, _: &DataBatch, attrs: &Attributes, _: &Properties) -> Result<OpOutcome> {
    done(
        ctx.sources
            .query_relational(attr_str(attrs, "source_id")?, attr_str(attrs, "statement")?)?,
    )
}
