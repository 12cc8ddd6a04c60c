//! Alternative selection, plan-level rewrites and operator-level settings.

use std::collections::{BTreeMap, BTreeSet};

use super::cost::{CostContext, Estimator, Objective};
use super::plan::{DataPlan, Edge, Fallback, NodeStatus};
use crate::canonical::digest_of;
use crate::error::{Error, Result};
use crate::expr::parse_expression;
use crate::operators::relational::right_names;
use crate::registry::OperatorRegistry;
use crate::value::Value;

/// Operators that call an LLM and take its operator-level settings.
const LLM_OPERATORS: &[&str] = &["nl2sql", "nl2llm", "web_extract", "query_breakdown"];

#[derive(Clone, Debug)]
pub struct OptimizeOptions {
    /// Apply pushdown and dedup; off yields the plain selected plan.
    pub rewrites: bool,
    /// Filled into `llm_source` of LLM-backed nodes that name none.
    pub default_llm: Option<String>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            rewrites: true,
            default_llm: None,
        }
    }
}

/// Follows the selected member of nested groups down to a plain node.
fn resolve(choices: &BTreeMap<String, Vec<String>>, id: &str) -> String {
    let mut cur = id.to_string();
    while let Some(best) = choices.get(&cur).and_then(|r| r.first()) {
        cur = best.clone();
    }
    cur
}

/// Replaces every owner by its selected member and drops everything else.
fn splice(plan: &mut DataPlan, choices: &BTreeMap<String, Vec<String>>) {
    for e in &mut plan.edges {
        if plan.alternatives.contains_key(&e.from) {
            e.from = resolve(choices, &e.from);
        }
    }
    plan.root = resolve(choices, &plan.root);
    plan.alternatives.clear();
    plan.prune();
}

/// Next-best members, resolved into standalone subplans against `selected`.
fn fallbacks(refined: &DataPlan, selected: &DataPlan, choices: &BTreeMap<String, Vec<String>>) -> Vec<Fallback> {
    let mut out = Vec::new();
    for (group, ranked) in choices {
        let chosen = resolve(choices, group);
        if ranked.len() < 2 || !selected.nodes.contains_key(&chosen) {
            continue;
        }
        let mut sub = refined.clone();
        sub.root = ranked[1].clone();
        splice(&mut sub, choices);
        // inputs the group shares with the selected plan stay where they are
        let shared: BTreeSet<String> = refined
            .inputs(group)
            .iter()
            .flat_map(|e| selected.ancestors(&resolve(choices, &e.from)))
            .collect();
        let nodes: BTreeMap<_, _> = sub
            .nodes
            .into_iter()
            .filter(|(id, _)| !selected.nodes.contains_key(id))
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let edges = sub.edges.into_iter().filter(|e| nodes.contains_key(&e.to)).collect();
        let covers = selected
            .ancestors(&chosen)
            .into_iter()
            .filter(|n| !shared.contains(n))
            .collect();
        out.push(Fallback {
            group: group.clone(),
            replaces: chosen,
            covers,
            root: sub.root,
            nodes,
            edges,
        });
    }
    out
}

/// Column names a node is known to produce, when they follow from the plan
/// alone.
pub fn output_columns(plan: &DataPlan, id: &str) -> Option<BTreeSet<String>> {
    let node = plan.nodes.get(id)?;
    let a = &node.attributes;
    let names = |k: &str| -> Option<Vec<String>> {
        a.get(k)?
            .as_list()?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect()
    };
    let schema_keys = |k: &str| {
        a.get(k)
            .and_then(Value::as_map)
            .map(|m| m.keys().cloned().collect::<BTreeSet<_>>())
    };
    let input = |p: usize| {
        plan.inputs(id)
            .into_iter()
            .find(|e| e.port == p)
            .and_then(|e| output_columns(plan, &e.from))
    };
    match node.operator_id.as_str() {
        "values" => {
            let rows = a.get("rows")?.as_list()?;
            let mut shapes = rows
                .iter()
                .map(|r| r.as_map().map(|m| m.keys().cloned().collect::<BTreeSet<_>>()));
            match shapes.next() {
                Some(first) => {
                    let first = first?;
                    shapes.all(|s| s.as_ref() == Some(&first)).then_some(first)
                }
                None => schema_keys("schema"),
            }
        }
        "project" => {
            let rename = a.get("rename").and_then(Value::as_map);
            Some(
                names("columns")?
                    .into_iter()
                    .map(|c| {
                        rename
                            .and_then(|r| r.get(&c))
                            .and_then(Value::as_str)
                            .map(str::to_string)
                            .unwrap_or(c)
                    })
                    .collect(),
            )
        }
        "filter" | "sort_limit" | "in_filter" => input(0),
        "join" => {
            let left = input(0)?;
            let right = input(1)?;
            let mut out = left.clone();
            out.extend(right_names(&left, &right).into_values());
            Some(out)
        }
        "union" => {
            let inputs = plan.inputs(id);
            let first = output_columns(plan, &inputs.first()?.from)?;
            inputs[1..]
                .iter()
                .all(|e| output_columns(plan, &e.from).as_ref() == Some(&first))
                .then_some(first)
        }
        "group_agg" => {
            let mut out: BTreeSet<String> = names("keys").unwrap_or_default().into_iter().collect();
            for agg in a.get("aggs")?.as_list()? {
                out.insert(agg.as_map()?.get("as")?.as_str()?.to_string());
            }
            Some(out)
        }
        "extract" => {
            let mut out = input(0)?;
            out.insert(a.get("as")?.as_str()?.to_string());
            Some(out)
        }
        "nl2llm" | "web_extract" => schema_keys("output_schema"),
        _ => None,
    }
}

/// Predicate attributes, when all of them address the filter's only input.
fn filter_attributes(predicate: &str) -> Option<BTreeSet<String>> {
    let e = parse_expression(predicate).ok()?;
    let refs = e.attributes();
    refs.iter()
        .all(|r| r.port == 0)
        .then(|| refs.iter().map(|r| r.name.clone()).collect())
}

fn redirect_consumers(plan: &mut DataPlan, from: &str, to: &str) {
    for e in &mut plan.edges {
        if e.from == from {
            e.from = to.to_string();
        }
    }
    if plan.root == from {
        plan.root = to.to_string();
    }
}

fn fresh_id(plan: &DataPlan, base: &str) -> String {
    let mut n = 0;
    loop {
        let id = format!("{base}.p{n}");
        if !plan.nodes.contains_key(&id) {
            return id;
        }
        n += 1;
    }
}

/// One pushdown step; returns the filter moved and the nodes now standing
/// in for it.
fn push_one(plan: &mut DataPlan) -> Option<(String, Vec<String>)> {
    let filters: Vec<String> = plan
        .nodes
        .iter()
        .filter(|(_, n)| n.operator_id == "filter")
        .map(|(id, _)| id.clone())
        .collect();
    for f in filters {
        let Some(below) = plan.inputs(&f).first().map(|e| e.from.clone()) else {
            continue;
        };
        if below == plan.root || plan.consumers(&below).len() != 1 {
            continue;
        }
        let Some(attrs) = plan.nodes[&f]
            .attributes
            .get("predicate")
            .and_then(Value::as_str)
            .and_then(filter_attributes)
        else {
            continue;
        };
        let op = plan.nodes[&below].operator_id.clone();
        if op == "union" {
            let inputs: Vec<Edge> = plan.inputs(&below).into_iter().cloned().collect();
            let template = plan.nodes[&f].clone();
            let mut copies = Vec::new();
            for input in inputs {
                let id = fresh_id(plan, &f);
                plan.nodes.insert(id.clone(), template.clone());
                for e in &mut plan.edges {
                    if *e == input {
                        e.from = id.clone();
                    }
                }
                plan.edges.push(Edge::new(&input.from, &id, 0));
                copies.push(id);
            }
            plan.edges.retain(|e| e.to != f);
            plan.nodes.remove(&f);
            redirect_consumers(plan, &f, &below);
            return Some((f, copies));
        }
        if op != "join" {
            continue;
        }
        let (Some(left), Some(right)) = (
            plan.inputs(&below).iter().find(|e| e.port == 0).map(|e| e.from.clone()),
            plan.inputs(&below).iter().find(|e| e.port == 1).map(|e| e.from.clone()),
        ) else {
            continue;
        };
        let kind = plan.nodes[&below]
            .attributes
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("inner");
        let left_cols = output_columns(plan, &left);
        let right_cols = output_columns(plan, &right);
        let side = match (&left_cols, &right_cols) {
            (Some(l), _) if attrs.is_subset(l) => 0,
            (Some(l), Some(r)) if kind == "inner" && attrs.is_subset(r) && attrs.is_disjoint(l) => 1,
            _ => continue,
        };
        let producer = if side == 0 { left } else { right };
        plan.edges.retain(|e| !(e.to == f || (e.to == below && e.port == side)));
        redirect_consumers(plan, &f, &below);
        plan.edges.push(Edge::new(&producer, &f, 0));
        plan.edges.push(Edge::new(&f, &below, side));
        return Some((f.clone(), vec![f]));
    }
    None
}

/// Merges pure nodes with equal operator, attributes, properties and
/// inputs, keeping the smallest id. Returns removed id to keeper.
fn dedup(plan: &mut DataPlan, registry: &OperatorRegistry) -> Result<BTreeMap<String, String>> {
    let mut merged = BTreeMap::new();
    let Some(order) = plan.topo_order() else {
        return Ok(merged);
    };
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for id in order {
        let node = &plan.nodes[&id];
        if !registry.get(&node.operator_id).is_some_and(|d| d.pure) {
            continue;
        }
        let mut inputs: Vec<(String, usize)> = plan.inputs(&id).iter().map(|e| (e.from.clone(), e.port)).collect();
        inputs.sort();
        let key = digest_of(&(&node.operator_id, &node.attributes, &node.properties, &inputs))?;
        let Some(other) = seen.get(&key).cloned() else {
            seen.insert(key, id);
            continue;
        };
        let (keep, drop) = if other < id { (other, id) } else { (id, other) };
        plan.edges.retain(|e| e.to != drop);
        redirect_consumers(plan, &drop, &keep);
        plan.nodes.remove(&drop);
        for v in merged.values_mut() {
            if *v == drop {
                *v = keep.clone();
            }
        }
        merged.insert(drop, keep.clone());
        seen.insert(key, keep);
    }
    plan.edges.sort();
    plan.edges.dedup();
    Ok(merged)
}

fn rename_fallbacks(fallbacks: &mut [Fallback], renames: &BTreeMap<String, Vec<String>>) {
    for fb in fallbacks {
        let map = |id: &String| renames.get(id).cloned().unwrap_or_else(|| vec![id.clone()]);
        fb.replaces = map(&fb.replaces).into_iter().next().unwrap_or_default();
        let covers: BTreeSet<String> = fb.covers.iter().flat_map(map).collect();
        fb.covers = covers.into_iter().collect();
        for e in &mut fb.edges {
            if let Some(to) = renames.get(&e.from).and_then(|v| v.first()) {
                e.from = to.clone();
            }
        }
    }
}

/// Selects one member per alternatives group under `objective`, rewrites
/// the selected plan and applies operator-level settings. The result has no
/// groups; the runner-up of each group is kept as a fallback.
pub fn optimize(
    plan: &DataPlan,
    registry: &OperatorRegistry,
    ctx: CostContext<'_>,
    objective: Objective,
    options: &OptimizeOptions,
) -> Result<DataPlan> {
    let mut out = plan.clone();
    let mut fbs = Vec::new();
    if !plan.alternatives.is_empty() {
        let est = Estimator::new(plan, ctx, objective);
        est.estimate(&plan.root)?;
        let choices = est.choices();
        if let Some(g) = plan
            .alternatives
            .keys()
            .find(|g| !choices.contains_key(*g) && plan.ancestors(&plan.root).contains(*g))
        {
            return Err(Error::Infeasible { group: g.clone() });
        }
        splice(&mut out, &choices);
        fbs = fallbacks(plan, &out, &choices);
    }
    if options.rewrites {
        let mut renames: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut budget = out.nodes.len() * out.nodes.len() + 1;
        while budget > 0 {
            let Some((from, to)) = push_one(&mut out) else { break };
            if to != [from.clone()] {
                renames.insert(from, to);
            }
            budget -= 1;
        }
        for (drop, keep) in dedup(&mut out, registry)? {
            renames.insert(drop, vec![keep]);
        }
        rename_fallbacks(&mut fbs, &renames);
        out.stages = out.levels().unwrap_or_default();
    }
    out.fallbacks = fbs;
    for node in out
        .nodes
        .values_mut()
        .chain(out.fallbacks.iter_mut().flat_map(|f| f.nodes.values_mut()))
    {
        node.status = NodeStatus::Ready;
        if LLM_OPERATORS.contains(&node.operator_id.as_str()) {
            let p = &mut node.properties;
            p.entry("max_retries".into())
                .or_insert(Value::from(objective.max_retries));
            p.entry("cache".into()).or_insert(Value::from(true));
            if let Some(llm) = &options.default_llm {
                p.entry("llm_source".into())
                    .or_insert_with(|| Value::from(llm.as_str()));
            }
        }
    }
    Ok(out)
}
