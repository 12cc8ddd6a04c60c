//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the engine's operators, planner or sources: the
//! relational model is a separate value type with naive loops, and the
//! bay-area oracle reads the fixture files directly.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use dil_core::{Row, Table, Value};

pub mod cost;
pub mod props;

/// Oracle-side value. Floats come from a small dyadic pool so arithmetic on
/// them is exact.
#[derive(Clone, Debug, PartialEq)]
pub enum M {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

pub type MRow = BTreeMap<String, M>;

impl M {
    fn rank(&self) -> u8 {
        match self {
            M::Null => 0,
            M::Bool(_) => 1,
            M::Int(_) | M::Float(_) => 2,
            M::Str(_) => 3,
        }
    }

    fn num(&self) -> Option<f64> {
        match self {
            M::Int(i) => Some(*i as f64),
            M::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Literal syntax understood by the predicate language.
    pub fn literal(&self) -> String {
        match self {
            M::Null => "null".into(),
            M::Bool(b) => b.to_string(),
            M::Int(i) => i.to_string(),
            M::Float(f) => format!("{f:?}"),
            M::Str(s) => format!("'{s}'"),
        }
    }
}

/// Total order: null < bool < number < string; numbers by value, an
/// integer before an equal float.
pub fn total_cmp(a: &M, b: &M) -> Ordering {
    if a.rank() != b.rank() {
        return a.rank().cmp(&b.rank());
    }
    match (a, b) {
        (M::Bool(x), M::Bool(y)) => x.cmp(y),
        (M::Str(x), M::Str(y)) => x.cmp(y),
        (M::Null, M::Null) => Ordering::Equal,
        _ => {
            let (x, y) = (a.num().unwrap(), b.num().unwrap());
            x.partial_cmp(&y).unwrap().then_with(|| {
                let fa = matches!(a, M::Float(_));
                let fb = matches!(b, M::Float(_));
                fa.cmp(&fb)
            })
        }
    }
}

pub fn to_value(m: &M) -> Value {
    match m {
        M::Null => Value::Null,
        M::Bool(b) => Value::Bool(*b),
        M::Int(i) => Value::Int(*i),
        M::Float(f) => Value::float(*f).unwrap(),
        M::Str(s) => Value::Str(s.clone()),
    }
}

pub fn from_value(v: &Value) -> M {
    match v {
        Value::Null => M::Null,
        Value::Bool(b) => M::Bool(*b),
        Value::Int(i) => M::Int(*i),
        Value::Float(f) => M::Float(f.get()),
        Value::Str(s) => M::Str(s.clone()),
        other => panic!("oracle model has no {other:?}"),
    }
}

pub fn to_table(rows: &[MRow]) -> Table {
    Table::new(
        rows.iter()
            .map(|r| r.iter().map(|(k, v)| (k.clone(), to_value(v))).collect::<Row>())
            .collect(),
    )
}

pub fn from_table(t: &Table) -> Vec<MRow> {
    t.rows
        .iter()
        .map(|r| r.iter().map(|(k, v)| (k.clone(), from_value(v))).collect())
        .collect()
}

pub fn columns(rows: &[MRow]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        for k in r.keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    cols.sort();
    cols
}

// ---- project ----

pub fn project(rows: &[MRow], cols: &[String], rename: &BTreeMap<String, String>) -> Vec<MRow> {
    let mut out = Vec::new();
    for r in rows {
        let mut o = MRow::new();
        for c in cols {
            let name = rename.get(c).unwrap_or(c).clone();
            o.insert(name, r.get(c).cloned().unwrap_or(M::Null));
        }
        out.push(o);
    }
    out
}

// ---- predicates ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    pub const ALL: [Op; 6] = [Op::Eq, Op::Ne, Op::Lt, Op::Le, Op::Gt, Op::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }

    fn holds(self, o: Ordering) -> bool {
        match self {
            Op::Eq => o.is_eq(),
            Op::Ne => o.is_ne(),
            Op::Lt => o.is_lt(),
            Op::Le => o.is_le(),
            Op::Gt => o.is_gt(),
            Op::Ge => o.is_ge(),
        }
    }
}

/// Comparison semantics of the predicate language: numbers by value,
/// same-typed strings and booleans by order, null only equals null, any
/// other pairing is false.
pub fn compare(op: Op, a: &M, b: &M) -> bool {
    match (a, b) {
        (M::Int(_) | M::Float(_), M::Int(_) | M::Float(_)) => {
            op.holds(a.num().unwrap().partial_cmp(&b.num().unwrap()).unwrap())
        }
        (M::Str(x), M::Str(y)) => op.holds(x.cmp(y)),
        (M::Bool(x), M::Bool(y)) => op.holds(x.cmp(y)),
        (M::Null, M::Null) => op == Op::Eq,
        _ => false,
    }
}

#[derive(Clone, Debug)]
pub enum Pred {
    Cmp(String, Op, M),
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
    Not(Box<Pred>),
}

impl Pred {
    pub fn render(&self) -> String {
        match self {
            Pred::Cmp(c, op, lit) => format!("{c} {} {}", op.symbol(), lit.literal()),
            Pred::And(a, b) => format!("({}) and ({})", a.render(), b.render()),
            Pred::Or(a, b) => format!("({}) or ({})", a.render(), b.render()),
            Pred::Not(a) => format!("not ({})", a.render()),
        }
    }

    pub fn holds(&self, r: &MRow) -> bool {
        match self {
            Pred::Cmp(c, op, lit) => r.get(c).is_some_and(|v| compare(*op, v, lit)),
            Pred::And(a, b) => a.holds(r) && b.holds(r),
            Pred::Or(a, b) => a.holds(r) || b.holds(r),
            Pred::Not(a) => !a.holds(r),
        }
    }
}

pub fn filter(rows: &[MRow], p: &Pred) -> Vec<MRow> {
    rows.iter().filter(|r| p.holds(r)).cloned().collect()
}

// ---- join ----

fn key_eq(a: Option<&M>, b: Option<&M>) -> bool {
    match (a, b) {
        (None, _) | (_, None) | (Some(M::Null), _) | (_, Some(M::Null)) => false,
        (Some(x @ (M::Int(_) | M::Float(_))), Some(y @ (M::Int(_) | M::Float(_)))) => x.num() == y.num(),
        (Some(x), Some(y)) => x == y,
    }
}

/// `t0.<l> op t1.<r>` restriction.
#[derive(Clone, Debug)]
pub struct Theta {
    pub left: String,
    pub op: Op,
    pub right: String,
}

impl Theta {
    pub fn render(&self) -> String {
        format!("t0.{} {} t1.{}", self.left, self.op.symbol(), self.right)
    }
}

pub fn join(
    left: &[MRow],
    right: &[MRow],
    keys: Option<(&str, &str)>,
    theta: Option<&Theta>,
    outer: bool,
) -> Vec<MRow> {
    let lcols = columns(left);
    let mut names: Vec<(String, String)> = Vec::new();
    for c in columns(right) {
        let mut n = c.clone();
        while lcols.contains(&n) || names.iter().any(|(_, m)| *m == n) {
            n = format!("r_{n}");
        }
        names.push((c, n));
    }
    let rename = |c: &str| names.iter().find(|(k, _)| k == c).unwrap().1.clone();
    let mut out = Vec::new();
    for l in left {
        let mut any = false;
        for r in right {
            if let Some((lk, rk)) = keys {
                if !key_eq(l.get(lk), r.get(rk)) {
                    continue;
                }
            }
            if let Some(t) = theta {
                let ok = match (l.get(&t.left), r.get(&t.right)) {
                    (Some(a), Some(b)) => compare(t.op, a, b),
                    _ => false,
                };
                if !ok {
                    continue;
                }
            }
            any = true;
            let mut m = l.clone();
            for (k, v) in r {
                m.insert(rename(k), v.clone());
            }
            out.push(m);
        }
        if outer && !any {
            let mut m = l.clone();
            for (_, n) in &names {
                m.insert(n.clone(), M::Null);
            }
            out.push(m);
        }
    }
    out
}

pub fn in_filter(left: &[MRow], members: &[MRow], key: &str, member_key: &str) -> Vec<MRow> {
    left.iter()
        .filter(|l| members.iter().any(|m| key_eq(l.get(key), m.get(member_key))))
        .cloned()
        .collect()
}

// ---- union ----

pub fn union(tables: &[Vec<MRow>], distinct: bool) -> Vec<MRow> {
    let mut out: Vec<MRow> = Vec::new();
    for t in tables {
        for r in t {
            if distinct && out.iter().any(|o| same_row(o, r)) {
                continue;
            }
            out.push(r.clone());
        }
    }
    out
}

/// Structural equality: `1` and `1.0` differ.
fn same(a: &M, b: &M) -> bool {
    match (a, b) {
        (M::Float(x), M::Float(y)) => x.to_bits() == y.to_bits() || x == y,
        _ => a == b,
    }
}

fn same_row(a: &MRow, b: &MRow) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && same(va, vb))
}

// ---- sort_limit ----

pub fn sort_limit(rows: &[MRow], by: &[(String, bool)], limit: Option<usize>, offset: usize) -> Vec<MRow> {
    // insertion sort: stable by construction
    let mut out: Vec<MRow> = Vec::new();
    for r in rows {
        let mut pos = out.len();
        while pos > 0 && sort_before(r, &out[pos - 1], by) {
            pos -= 1;
        }
        out.insert(pos, r.clone());
    }
    out.into_iter().skip(offset).take(limit.unwrap_or(usize::MAX)).collect()
}

fn sort_before(a: &MRow, b: &MRow, by: &[(String, bool)]) -> bool {
    for (k, desc) in by {
        let va = a.get(k).unwrap_or(&M::Null);
        let vb = b.get(k).unwrap_or(&M::Null);
        let o = match (va, vb) {
            (M::Null, M::Null) => Ordering::Equal,
            (M::Null, _) => Ordering::Less,
            (_, M::Null) => Ordering::Greater,
            _ if *desc => total_cmp(vb, va),
            _ => total_cmp(va, vb),
        };
        match o {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    false
}

// ---- group_agg ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AggFn {
    Count,
    Sum,
    Min,
    Max,
    Avg,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Sum, AggFn::Min, AggFn::Max, AggFn::Avg];

    pub fn name(self) -> &'static str {
        match self {
            AggFn::Count => "count",
            AggFn::Sum => "sum",
            AggFn::Min => "min",
            AggFn::Max => "max",
            AggFn::Avg => "avg",
        }
    }
}

pub fn group_agg(rows: &[MRow], keys: &[String], aggs: &[(AggFn, String, String)]) -> Vec<MRow> {
    let mut groups: Vec<(Vec<M>, Vec<&MRow>)> = Vec::new();
    for r in rows {
        let k: Vec<M> = keys.iter().map(|c| r.get(c).cloned().unwrap_or(M::Null)).collect();
        match groups
            .iter_mut()
            .find(|(g, _)| g.len() == k.len() && g.iter().zip(&k).all(|(a, b)| same(a, b)))
        {
            Some((_, members)) => members.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    let mut out = Vec::new();
    for (k, members) in groups {
        let mut o: MRow = keys.iter().cloned().zip(k).collect();
        for (f, on, alias) in aggs {
            let vals: Vec<&M> = members
                .iter()
                .filter_map(|r| r.get(on))
                .filter(|v| **v != M::Null)
                .collect();
            let v = match f {
                AggFn::Count => M::Int(members.len() as i64),
                AggFn::Min => pick(&vals, Ordering::Less),
                AggFn::Max => pick(&vals, Ordering::Greater),
                AggFn::Sum | AggFn::Avg => {
                    let nums: Vec<&M> = vals.into_iter().filter(|v| v.num().is_some()).collect();
                    if nums.is_empty() {
                        M::Null
                    } else if *f == AggFn::Avg {
                        M::Float(nums.iter().map(|v| v.num().unwrap()).sum::<f64>() / nums.len() as f64)
                    } else if nums.iter().all(|v| matches!(v, M::Int(_))) {
                        M::Int(nums.iter().map(|v| if let M::Int(i) = v { *i } else { 0 }).sum())
                    } else {
                        M::Float(nums.iter().map(|v| v.num().unwrap()).sum())
                    }
                }
            };
            o.insert(alias.clone(), v);
        }
        out.push(o);
    }
    out
}

fn pick(vals: &[&M], want: Ordering) -> M {
    let mut best: Option<&M> = None;
    for v in vals {
        best = match best {
            Some(b) if total_cmp(v, b) != want => Some(b),
            _ => Some(v),
        };
    }
    best.cloned().unwrap_or(M::Null)
}

/// Float-tolerant row comparison for aggregate outputs.
pub const FLOAT_TOLERANCE: f64 = 1e-12;

pub fn rows_match(a: &[MRow], b: &[MRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y).all(|((kx, vx), (ky, vy))| {
                    kx == ky
                        && match (vx, vy) {
                            (M::Float(p), M::Float(q)) => (p - q).abs() <= FLOAT_TOLERANCE,
                            _ => vx == vy,
                        }
                })
        })
}

// ---- the motivating query, brute force over the fixture files ----

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Response of the first stub rule whose pattern matches a prompt with this
/// task and question.
fn stub_response(stub: &serde_json::Value, task: &str, question: &str) -> serde_json::Value {
    let prompt = format!("TASK: {task}\nQUESTION: {question}\n");
    for rule in stub.as_array().unwrap() {
        let re = regex_lite::Regex::new(rule["pattern"].as_str().unwrap()).unwrap();
        if re.is_match(&prompt) {
            return rule["response"].clone();
        }
    }
    panic!("no stub rule for {task}: {question}");
}

fn csv_rows(path: &Path) -> Vec<MRow> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    rdr.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, f)| {
                    let v = if f.is_empty() {
                        M::Null
                    } else if let Ok(i) = f.parse::<i64>() {
                        M::Int(i)
                    } else {
                        M::Str(f.to_string())
                    };
                    (h.clone(), v)
                })
                .collect()
        })
        .collect()
}

fn json_scalar(v: &serde_json::Value) -> M {
    match v {
        serde_json::Value::Null => M::Null,
        serde_json::Value::Bool(b) => M::Bool(*b),
        serde_json::Value::Number(n) => n.as_i64().map(M::Int).unwrap_or_else(|| M::Float(n.as_f64().unwrap())),
        serde_json::Value::String(s) => M::Str(s.clone()),
        other => panic!("not a scalar: {other}"),
    }
}

/// Rows the bay-area question should return, derived only from the jobs
/// CSV, the stub mapping and the scripted answers.
pub fn bay_area_rows(fixtures: &Path, question: &str) -> Vec<MRow> {
    let stub = read_json(&fixtures.join("llm_stub.json"));
    let answers = read_json(&fixtures.join("answers.json"));
    let config = read_json(&fixtures.join("config.json"));
    let steps = stub_response(&stub, "query_breakdown", &question.to_lowercase());

    let like = regex_lite::Regex::new(r"(?i)where\s+(\w+)\s+like\s+'%([^%']*)%'").unwrap();
    let theta = regex_lite::Regex::new(r"t0\.(\w+)\s*(>=|<=|!=|>|<|=)\s*t1\.(\w+)").unwrap();

    let mut current: Vec<MRow> = Vec::new();
    for (i, step) in steps.as_array().unwrap().iter().enumerate() {
        let sub = step["sub_question"].as_str().unwrap();
        let target = step["target"].as_str().unwrap();
        let protocol = config["sources"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["source_id"] == target)
            .map(|s| s["protocol"].as_str().unwrap().to_string())
            .unwrap();
        let rows: Vec<MRow> = match protocol.as_str() {
            "relational" => {
                let sql = stub_response(&stub, "nl2sql", &sub.to_lowercase())[0]["sql"]
                    .as_str()
                    .unwrap()
                    .to_string();
                let caps = like
                    .captures(&sql)
                    .expect("oracle understands LIKE '%..%' filters only");
                let (col, needle) = (caps[1].to_string(), caps[2].to_lowercase());
                let table = config["sources"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .find(|s| s["source_id"] == target)
                    .unwrap()["connection"]["csv"]
                    .as_object()
                    .unwrap()
                    .values()
                    .next()
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string();
                csv_rows(&fixtures.join(table))
                    .into_iter()
                    .filter(|r| matches!(r.get(&col), Some(M::Str(s)) if s.to_lowercase().contains(&needle)))
                    .collect()
            }
            "llm" => stub_response(&stub, "nl2llm", &sub.to_lowercase())
                .as_array()
                .unwrap()
                .iter()
                .map(|r| {
                    r.as_object()
                        .unwrap()
                        .iter()
                        .map(|(k, v)| (k.clone(), json_scalar(v)))
                        .collect()
                })
                .collect(),
            "user" => {
                let a = answers[sub]
                    .as_object()
                    .expect("scripted answer for every user sub-question");
                vec![a.iter().map(|(k, v)| (k.clone(), json_scalar(v))).collect()]
            }
            other => panic!("oracle has no rule for {other} sources"),
        };
        if i == 0 {
            current = rows;
            continue;
        }
        current = match step["integrate"].as_str().unwrap() {
            "in" => {
                let key = step["key"].as_str().unwrap();
                current
                    .into_iter()
                    .filter(|r| rows.iter().any(|m| r.get(key).is_some() && r.get(key) == m.get(key)))
                    .collect()
            }
            "join" => {
                let caps = theta.captures(step["predicate"].as_str().unwrap()).unwrap();
                let op = Op::ALL.into_iter().find(|o| o.symbol() == &caps[2]).unwrap();
                let mut out = Vec::new();
                for l in &current {
                    for r in &rows {
                        if let (Some(a), Some(b)) = (l.get(&caps[1]), r.get(&caps[3])) {
                            if compare(op, a, b) {
                                let mut m = l.clone();
                                m.extend(r.iter().map(|(k, v)| (k.clone(), v.clone())));
                                out.push(m);
                            }
                        }
                    }
                }
                out
            }
            other => panic!("unknown integration `{other}`"),
        };
    }
    current
}

/// Rows sorted by canonical digest, the comparison form for set equality.
pub fn sorted_digests(rows: &[MRow]) -> Vec<String> {
    let t = to_table(rows);
    let mut d: Vec<String> = t
        .rows
        .iter()
        .map(|r| dil_core::digest(&dil_core::DataBatch::single(Table::new(vec![r.clone()]))).unwrap())
        .collect();
    d.sort();
    d
}
