//! Randomized cases for the relational operators, checked against the naive
//! implementations in the parent module.

use std::collections::BTreeMap;

use dil_core::operators::invoke_pure;
use dil_core::{DataBatch, Value};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::*;

/// Cases generated per operator.
pub const CASES: u32 = 256;
pub const MAX_ROWS: usize = 8;

pub const OPERATORS: [&str; 7] = [
    "project",
    "filter",
    "join",
    "in_filter",
    "union",
    "sort_limit",
    "group_agg",
];

pub fn value() -> impl Strategy<Value = M> {
    prop_oneof![
        1 => Just(M::Null),
        1 => any::<bool>().prop_map(M::Bool),
        3 => (-2i64..=3).prop_map(M::Int),
        2 => prop::sample::select(vec![-1.0, 0.5, 1.0, 2.0]).prop_map(M::Float),
        2 => prop::sample::select(vec!["a", "b", "c"]).prop_map(|s| M::Str(s.to_string())),
    ]
}

/// Up to [`MAX_ROWS`] rows over `cols`; roughly one cell in ten is absent.
pub fn table(cols: Vec<&'static str>) -> impl Strategy<Value = Vec<MRow>> {
    let row = prop::collection::vec((any::<u8>(), value()), cols.len()).prop_map(move |cells| {
        cols.iter()
            .zip(cells)
            .filter(|(_, (p, _))| *p >= 26)
            .map(|(c, (_, v))| (c.to_string(), v))
            .collect::<MRow>()
    });
    prop::collection::vec(row, 0..=MAX_ROWS)
}

fn column() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "z"]).prop_map(str::to_string)
}

fn op() -> impl Strategy<Value = Op> {
    prop::sample::select(Op::ALL.to_vec())
}

pub fn predicate() -> impl Strategy<Value = Pred> {
    let leaf = (column(), op(), value()).prop_map(|(c, o, v)| Pred::Cmp(c, o, v));
    leaf.prop_recursive(2, 6, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Pred::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Pred::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|a| Pred::Not(Box::new(a))),
        ]
    })
}

fn strs(v: &[String]) -> Value {
    Value::List(v.iter().map(|s| Value::from(s.as_str())).collect())
}

fn run_engine(op: &str, inputs: &[&[MRow]], attrs: Vec<(&str, Value)>) -> Result<Vec<MRow>, TestCaseError> {
    let batch = DataBatch {
        tables: inputs.iter().map(|t| to_table(t)).collect(),
    };
    let attrs = attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let out = invoke_pure(op, batch, attrs).map_err(|e| TestCaseError::fail(format!("{op} failed: {e}")))?;
    Ok(from_table(&out.tables[0]))
}

fn expect(op: &str, got: Vec<MRow>, want: Vec<MRow>) -> Result<(), TestCaseError> {
    if rows_match(&got, &want) {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{op}: engine {got:?} != oracle {want:?}")))
    }
}

type ProjectCase = (Vec<MRow>, Vec<String>, BTreeMap<String, String>);

fn project_case() -> impl Strategy<Value = ProjectCase> {
    (
        table(vec!["a", "b", "c"]),
        prop::sample::subsequence(vec!["a", "b", "c", "z"], 1..=4),
        prop::collection::btree_map(column(), prop::sample::select(vec!["x", "y", "w"]), 0..=2),
        any::<bool>(),
    )
        .prop_map(|(t, cols, rename, reverse)| {
            let mut cols: Vec<String> = cols.into_iter().map(str::to_string).collect();
            if reverse {
                cols.reverse();
            }
            // keep only renames that leave output names unique
            let mut used: Vec<String> = Vec::new();
            let mut kept = BTreeMap::new();
            for c in &cols {
                let n = match rename.get(c) {
                    Some(r) if !cols.contains(&r.to_string()) && !used.contains(&r.to_string()) => {
                        kept.insert(c.clone(), r.to_string());
                        r.to_string()
                    }
                    _ => c.clone(),
                };
                used.push(n);
            }
            (t, cols, kept)
        })
}

fn check_project((t, cols, rename): ProjectCase) -> Result<(), TestCaseError> {
    let rename_v = Value::Map(
        rename
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(v.as_str())))
            .collect(),
    );
    let got = run_engine("project", &[&t], vec![("columns", strs(&cols)), ("rename", rename_v)])?;
    expect("project", got, project(&t, &cols, &rename))
}

fn check_filter((t, p): (Vec<MRow>, Pred)) -> Result<(), TestCaseError> {
    let got = run_engine("filter", &[&t], vec![("predicate", Value::from(p.render()))])?;
    expect("filter", got, filter(&t, &p))
}

type JoinCase = (Vec<MRow>, Vec<MRow>, Option<(String, String)>, Option<Theta>, bool);

fn join_case() -> impl Strategy<Value = JoinCase> {
    let right_cols = prop::sample::select(vec![vec!["a", "d"], vec!["a", "c", "r_a"], vec!["d", "e"], vec!["b"]]);
    (table(vec!["a", "b", "c"]), right_cols).prop_flat_map(|(left, rc)| {
        let rcs: Vec<String> = rc.iter().map(|s| s.to_string()).collect();
        let lcs = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let keys = prop::option::of((prop::sample::select(lcs.clone()), prop::sample::select(rcs.clone())));
        let theta = prop::option::of((prop::sample::select(lcs), op(), prop::sample::select(rcs)).prop_map(
            |(l, o, r)| Theta {
                left: l,
                op: o,
                right: r,
            },
        ));
        (Just(left), table(rc), keys, theta, any::<bool>())
    })
}

fn check_join((l, r, keys, theta, outer): JoinCase) -> Result<(), TestCaseError> {
    let mut attrs = vec![("kind", Value::from(if outer { "left" } else { "inner" }))];
    if let Some((lk, rk)) = &keys {
        attrs.push(("left_key", Value::from(lk.as_str())));
        attrs.push(("right_key", Value::from(rk.as_str())));
    }
    if let Some(t) = &theta {
        attrs.push(("predicate", Value::from(t.render())));
    }
    let got = run_engine("join", &[&l, &r], attrs)?;
    let want = join(
        &l,
        &r,
        keys.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        theta.as_ref(),
        outer,
    );
    expect("join", got, want)
}

fn check_in_filter((l, m, mk): (Vec<MRow>, Vec<MRow>, String)) -> Result<(), TestCaseError> {
    let got = run_engine(
        "in_filter",
        &[&l, &m],
        vec![("key", Value::from("a")), ("member_key", Value::from(mk.as_str()))],
    )?;
    expect("in_filter", got, in_filter(&l, &m, "a", &mk))
}

fn check_union((ts, distinct): (Vec<Vec<MRow>>, bool)) -> Result<(), TestCaseError> {
    let refs: Vec<&[MRow]> = ts.iter().map(Vec::as_slice).collect();
    let got = run_engine("union", &refs, vec![("distinct", Value::Bool(distinct))])?;
    expect("union", got, union(&ts, distinct))
}

type SortCase = (Vec<MRow>, Vec<(String, bool)>, Option<usize>, usize);

fn check_sort_limit((t, by, limit, offset): SortCase) -> Result<(), TestCaseError> {
    let by_v = Value::List(
        by.iter()
            .map(|(k, d)| {
                Value::Map(BTreeMap::from([
                    ("key".to_string(), Value::from(k.as_str())),
                    ("desc".to_string(), Value::Bool(*d)),
                ]))
            })
            .collect(),
    );
    let mut attrs = vec![("by", by_v), ("offset", Value::Int(offset as i64))];
    if let Some(l) = limit {
        attrs.push(("limit", Value::Int(l as i64)));
    }
    let got = run_engine("sort_limit", &[&t], attrs)?;
    expect("sort_limit", got, sort_limit(&t, &by, limit, offset))
}

type GroupCase = (Vec<MRow>, Vec<String>, Vec<(AggFn, String, String)>);

fn group_case() -> impl Strategy<Value = GroupCase> {
    (
        table(vec!["a", "b", "c"]),
        prop::sample::subsequence(vec!["a", "b"], 0..=2),
        prop::collection::vec((prop::sample::select(AggFn::ALL.to_vec()), column()), 1..=3),
    )
        .prop_map(|(t, keys, aggs)| {
            let keys = keys.into_iter().map(str::to_string).collect();
            let aggs = aggs
                .into_iter()
                .enumerate()
                .map(|(i, (f, on))| (f, on, format!("agg{i}")))
                .collect();
            (t, keys, aggs)
        })
}

fn check_group_agg((t, keys, aggs): GroupCase) -> Result<(), TestCaseError> {
    let aggs_v = Value::List(
        aggs.iter()
            .map(|(f, on, alias)| {
                Value::Map(BTreeMap::from([
                    ("fn".to_string(), Value::from(f.name())),
                    ("on".to_string(), Value::from(on.as_str())),
                    ("as".to_string(), Value::from(alias.as_str())),
                ]))
            })
            .collect(),
    );
    let got = run_engine("group_agg", &[&t], vec![("keys", strs(&keys)), ("aggs", aggs_v)])?;
    expect("group_agg", got, group_agg(&t, &keys, &aggs))
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Runs [`CASES`] random cases of one operator; the error carries the
/// minimal failing case.
pub fn run_operator(op: &str) -> Result<u32, String> {
    let mut r = runner();
    macro_rules! go {
        ($s:expr, $f:expr $(,)?) => {
            r.run(&$s, $f).map_err(|e| e.to_string())
        };
    }
    let res = match op {
        "project" => go!(project_case(), check_project),
        "filter" => go!((table(vec!["a", "b", "c"]), predicate()), check_filter),
        "join" => go!(join_case(), check_join),
        "in_filter" => go!(
            (
                table(vec!["a", "b"]),
                table(vec!["a", "k"]),
                prop::sample::select(vec!["a".to_string(), "k".to_string()]),
            ),
            check_in_filter,
        ),
        "union" => go!(
            (prop::collection::vec(table(vec!["a", "b"]), 1..=3), any::<bool>()),
            check_union,
        ),
        "sort_limit" => go!(
            (
                table(vec!["a", "b", "c"]),
                prop::collection::vec((column(), any::<bool>()), 0..=2),
                prop::option::of(0usize..=MAX_ROWS + 1),
                0usize..=3,
            ),
            check_sort_limit,
        ),
        "group_agg" => go!(group_case(), check_group_agg),
        other => return Err(format!("no cases for `{other}`")),
    };
    res.map(|_| CASES)
}
