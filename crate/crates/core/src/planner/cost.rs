//! Rule-based cost estimates and alternative selection.
//!
//! The constants live in `assets/cost_model.json`; they are model knobs, not
//! measurements.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::DataPlan;
use crate::error::{Error, Result};
use crate::registry::DataRegistry;
use crate::sources::UserSource;
use crate::value::Value;

pub const DEFAULT_COST_MODEL: &str = include_str!("../../assets/cost_model.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub default_rows: f64,
    pub scan_latency: f64,
    pub scan_latency_per_row: f64,
    pub scan_quality: f64,
    pub filter_selectivity: f64,
    pub join_selectivity: f64,
    pub in_selectivity: f64,
    pub local_latency: f64,
    pub values_latency: f64,
    pub llm_rows: f64,
    pub llm_latency: f64,
    pub llm_money: f64,
    pub llm_quality: f64,
    pub user_rows: f64,
    pub user_latency: f64,
    pub user_fresh_latency: f64,
    pub user_quality: f64,
    pub vector_latency: f64,
    pub vector_quality: f64,
    pub web_rows: f64,
    pub web_latency: f64,
    pub web_money: f64,
    pub web_quality: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_COST_MODEL).expect("bundled cost model parses")
    }
}

impl CostModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("cost model {}", path.display()), e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub out_rows: f64,
    pub latency: f64,
    pub money: f64,
    pub quality: f64,
}

impl CostEstimate {
    pub fn zero() -> Self {
        CostEstimate::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    #[serde(default)]
    pub quality_floor: f64,
    /// Verification retries given to LLM-backed operators.
    #[serde(default = "default_retries")]
    pub max_retries: i64,
}

fn default_retries() -> i64 {
    crate::sources::llm::DEFAULT_MAX_RETRIES
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            quality_floor: 0.0,
            max_retries: default_retries(),
        }
    }
}

/// Everything an estimate may consult besides the plan.
#[derive(Clone, Copy)]
pub struct CostContext<'a> {
    pub model: &'a CostModel,
    pub registry: Option<&'a DataRegistry>,
    pub users: Option<(&'a UserSource, &'a str)>,
}

impl<'a> CostContext<'a> {
    pub fn new(model: &'a CostModel) -> Self {
        CostContext {
            model,
            registry: None,
            users: None,
        }
    }
}

/// Estimate of one node's subplan plus what selection needs to know about it.
#[derive(Clone, Debug)]
pub struct NodeEstimate {
    pub cost: CostEstimate,
    /// Nodes whose own cost is included (shared producers counted once).
    pub nodes: BTreeSet<String>,
    /// Source ids touched by those nodes.
    pub sources: BTreeSet<String>,
}

/// Estimates nodes bottom-up, resolving each alternatives group to its best
/// member under the objective as it goes.
pub struct Estimator<'a> {
    plan: &'a DataPlan,
    ctx: CostContext<'a>,
    objective: Objective,
    memo: RefCell<BTreeMap<String, NodeEstimate>>,
    /// Group id to ranked feasible members (best first).
    choices: RefCell<BTreeMap<String, Vec<String>>>,
    own: RefCell<BTreeMap<String, CostEstimate>>,
}

fn str_attr<'v>(attrs: &'v BTreeMap<String, Value>, k: &str) -> Option<&'v str> {
    attrs.get(k).and_then(Value::as_str)
}

impl<'a> Estimator<'a> {
    pub fn new(plan: &'a DataPlan, ctx: CostContext<'a>, objective: Objective) -> Self {
        Estimator {
            plan,
            ctx,
            objective,
            memo: RefCell::default(),
            choices: RefCell::default(),
            own: RefCell::default(),
        }
    }

    /// Ranked feasible members of every group estimated so far.
    pub fn choices(&self) -> BTreeMap<String, Vec<String>> {
        self.choices.borrow().clone()
    }

    /// The node's own contribution, before combining with its inputs.
    pub fn own_cost(&self, id: &str) -> Option<CostEstimate> {
        self.own.borrow().get(id).copied()
    }

    fn scan_rows(&self, source_id: &str, hint: Option<&str>) -> f64 {
        let Some(reg) = self.ctx.registry else {
            return self.ctx.model.default_rows;
        };
        let cols = reg.collections(source_id);
        let pick = |name: &str| {
            cols.iter()
                .find(|c| c.name().eq_ignore_ascii_case(name))
                .and_then(|c| c.statistics.row_count)
        };
        let counted = match hint {
            Some(h) => pick(h),
            None => cols.iter().filter_map(|c| c.statistics.row_count).max(),
        };
        counted.map(|n| n as f64).unwrap_or(self.ctx.model.default_rows)
    }

    fn statement_rows(&self, source_id: &str, statement: &str) -> f64 {
        let Some(reg) = self.ctx.registry else {
            return self.ctx.model.default_rows;
        };
        let lower = statement.to_lowercase();
        let mentioned = reg.collections(source_id).into_iter().find(|c| {
            crate::registry::tokenize(&lower)
                .iter()
                .any(|t| t == &c.name().to_lowercase())
        });
        mentioned
            .and_then(|c| c.statistics.row_count)
            .map(|n| n as f64)
            .unwrap_or(self.ctx.model.default_rows)
    }

    fn user_fresh(&self, question: &str) -> bool {
        self.ctx.users.is_some_and(|(u, ns)| u.has_fresh(ns, question))
    }

    /// Own cost of a physical node given its inputs' row estimates.
    fn local(&self, id: &str, inputs: &[f64]) -> CostEstimate {
        let m = self.ctx.model;
        let node = &self.plan.nodes[id];
        let a = &node.attributes;
        let first = inputs.first().copied().unwrap_or(0.0);
        let local = |rows: f64| CostEstimate {
            out_rows: rows,
            latency: m.local_latency,
            money: 0.0,
            quality: 1.0,
        };
        let scan = |rows: f64| CostEstimate {
            out_rows: rows,
            latency: m.scan_latency + m.scan_latency_per_row * rows,
            money: 0.0,
            quality: m.scan_quality,
        };
        let llm = CostEstimate {
            out_rows: m.llm_rows,
            latency: m.llm_latency,
            money: m.llm_money,
            quality: m.llm_quality,
        };
        match node.operator_id.as_str() {
            "sql_scan" => scan(self.statement_rows(
                str_attr(a, "source_id").unwrap_or_default(),
                str_attr(a, "statement").unwrap_or_default(),
            )),
            "nl2sql" => scan(self.scan_rows(
                str_attr(a, "source_id").unwrap_or_default(),
                str_attr(a, "collection_hint"),
            )),
            "filter" => local(first * m.filter_selectivity),
            "join" => local(first * inputs.get(1).copied().unwrap_or(0.0) * m.join_selectivity),
            "in_filter" => local(first * m.in_selectivity),
            "union" => local(inputs.iter().sum()),
            "sort_limit" => {
                let limit = a.get("limit").and_then(Value::as_f64).unwrap_or(f64::INFINITY);
                local(first.min(limit))
            }
            "values" => CostEstimate {
                out_rows: a.get("rows").and_then(Value::as_list).map(|r| r.len()).unwrap_or(0) as f64,
                latency: m.values_latency,
                money: 0.0,
                quality: 1.0,
            },
            "nl2llm" | "query_breakdown" => llm,
            "nl2u" => CostEstimate {
                out_rows: m.user_rows,
                latency: if self.user_fresh(str_attr(a, "question").unwrap_or_default()) {
                    m.user_fresh_latency
                } else {
                    m.user_latency
                },
                money: 0.0,
                quality: m.user_quality,
            },
            "nl2vec" => CostEstimate {
                out_rows: a.get("k").and_then(Value::as_f64).unwrap_or(5.0),
                latency: m.vector_latency,
                money: 0.0,
                quality: m.vector_quality,
            },
            "web_extract" => CostEstimate {
                out_rows: m.web_rows,
                latency: m.web_latency,
                money: m.web_money,
                quality: m.web_quality,
            },
            _ => local(first),
        }
    }

    /// Coverage-adjusted quality of a group member: the fraction of the
    /// owner's `required_sources` that the member touches.
    fn member_quality(&self, owner: &str, est: &NodeEstimate) -> f64 {
        let required: BTreeSet<String> = self.plan.nodes[owner]
            .properties
            .get("required_sources")
            .and_then(Value::as_list)
            .map(|l| l.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        if required.is_empty() {
            return est.cost.quality;
        }
        let covered = required.intersection(&est.sources).count() as f64;
        est.cost.quality * (covered / required.len() as f64)
    }

    /// Estimate of the subplan rooted at `id`.
    pub fn estimate(&self, id: &str) -> Result<NodeEstimate> {
        if let Some(e) = self.memo.borrow().get(id) {
            return Ok(e.clone());
        }
        let node = self.plan.node(id)?;
        let est = if let Some(members) = self.plan.alternatives.get(id) {
            let mut ranked: Vec<(String, NodeEstimate, f64)> = Vec::new();
            for m in members {
                let e = match self.estimate(m) {
                    Err(Error::Infeasible { .. }) => continue,
                    other => other?,
                };
                let q = self.member_quality(id, &e);
                ranked.push((m.clone(), e, q));
            }
            let floor = self.objective.quality_floor;
            ranked.retain(|(_, _, q)| *q + 1e-12 >= floor);
            ranked.sort_by(|(ia, ea, _), (ib, eb, _)| {
                ea.cost
                    .latency
                    .total_cmp(&eb.cost.latency)
                    .then_with(|| self.plan.nodes[ia].operator_id.cmp(&self.plan.nodes[ib].operator_id))
                    .then_with(|| ia.cmp(ib))
            });
            let Some((_, best, q)) = ranked.first().cloned() else {
                return Err(Error::Infeasible { group: id.to_string() });
            };
            self.choices
                .borrow_mut()
                .insert(id.to_string(), ranked.iter().map(|(m, _, _)| m.clone()).collect());
            let mut out = best;
            out.cost.quality = q;
            out
        } else {
            let inputs = self.plan.inputs(id);
            let mut input_est = Vec::with_capacity(inputs.len());
            for e in &inputs {
                input_est.push(self.estimate(&e.from)?);
            }
            let rows: Vec<f64> = input_est.iter().map(|e| e.cost.out_rows).collect();
            let own = self.local(id, &rows);
            self.own.borrow_mut().insert(id.to_string(), own);
            let mut nodes = BTreeSet::from([id.to_string()]);
            let mut sources = BTreeSet::new();
            if let Some(s) = str_attr(&node.attributes, "source_id") {
                sources.insert(s.to_string());
            }
            for e in &input_est {
                nodes.extend(e.nodes.iter().cloned());
                sources.extend(e.sources.iter().cloned());
            }
            let own_map = self.own.borrow();
            let money = nodes.iter().filter_map(|n| own_map.get(n)).map(|c| c.money).sum();
            let quality = input_est.iter().map(|e| e.cost.quality).fold(own.quality, f64::min);
            let latency = own.latency + input_est.iter().map(|e| e.cost.latency).fold(0.0, f64::max);
            NodeEstimate {
                cost: CostEstimate {
                    out_rows: own.out_rows,
                    latency,
                    money,
                    quality,
                },
                nodes,
                sources,
            }
        };
        self.memo.borrow_mut().insert(id.to_string(), est.clone());
        Ok(est)
    }
}

/// Whole-plan estimate; an empty plan costs nothing.
pub fn estimate_cost(plan: &DataPlan, ctx: CostContext<'_>, objective: Objective) -> Result<CostEstimate> {
    if plan.nodes.is_empty() {
        return Ok(CostEstimate::zero());
    }
    Ok(Estimator::new(plan, ctx, objective).estimate(&plan.root)?.cost)
}

/// One row of `plan explain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub node_id: String,
    pub operator_id: String,
    /// The node's own contribution; absent for group owners.
    pub own: Option<CostEstimate>,
    /// The subplan rooted at the node.
    pub subplan: CostEstimate,
}

/// Per-node estimates in topological order.
pub fn explain_costs(plan: &DataPlan, ctx: CostContext<'_>, objective: Objective) -> Result<Vec<CostRow>> {
    let order = plan
        .topo_order()
        .ok_or_else(|| Error::invalid("plan", "cannot explain a cyclic plan"))?;
    let est = Estimator::new(plan, ctx, objective);
    let mut rows = Vec::with_capacity(order.len());
    for id in order {
        let sub = match est.estimate(&id) {
            Ok(e) => e.cost,
            Err(Error::Infeasible { .. }) => continue,
            Err(e) => return Err(e),
        };
        rows.push(CostRow {
            operator_id: plan.nodes[&id].operator_id.clone(),
            own: est.own_cost(&id),
            subplan: sub,
            node_id: id,
        });
    }
    Ok(rows)
}
