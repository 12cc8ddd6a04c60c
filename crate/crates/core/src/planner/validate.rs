use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::plan::{DataPlan, NodeStatus};
use crate::registry::{OperatorKind, OperatorRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanViolationKind {
    MissingRoot,
    UnknownNode,
    UnknownOperator,
    Cycle,
    DanglingPort,
    DuplicatePort,
    Arity,
    Attributes,
    Unrefined,
    Group,
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub kind: PlanViolationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<usize>,
    /// Nodes on the cycle, for cycle violations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<String>,
    pub message: String,
}

impl PlanViolation {
    fn at(kind: PlanViolationKind, node: &str, message: impl Into<String>) -> Self {
        PlanViolation {
            kind,
            node: Some(node.to_string()),
            port: None,
            nodes: Vec::new(),
            message: message.into(),
        }
    }
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Everything wrong with a plan; empty means it can be executed once each
/// alternatives group has been resolved.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<PlanViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn count(&self, kind: PlanViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("plan is valid");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.message.clone()).collect();
        f.write_str(&msgs.join("; "))
    }
}

/// Cycles found by depth-first search over edges and member-to-owner links.
fn find_cycles(plan: &DataPlan) -> Vec<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Closed,
    }
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &plan.edges {
        if plan.nodes.contains_key(&e.from) && plan.nodes.contains_key(&e.to) {
            succ.entry(e.from.as_str()).or_default().push(e.to.as_str());
        }
    }
    for (g, members) in &plan.alternatives {
        for m in members {
            if plan.nodes.contains_key(m) && plan.nodes.contains_key(g) {
                succ.entry(m.as_str()).or_default().push(g.as_str());
            }
        }
    }
    let mut marks: BTreeMap<&str, Mark> = BTreeMap::new();
    let mut cycles = Vec::new();
    fn dfs<'a>(
        n: &'a str,
        succ: &BTreeMap<&'a str, Vec<&'a str>>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
        cycles: &mut Vec<Vec<String>>,
    ) {
        marks.insert(n, Mark::Open);
        stack.push(n);
        for &m in succ.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            match marks.get(m) {
                None => dfs(m, succ, marks, stack, cycles),
                Some(Mark::Open) => {
                    let from = stack.iter().position(|x| *x == m).unwrap();
                    cycles.push(stack[from..].iter().map(|s| s.to_string()).collect());
                }
                Some(Mark::Closed) => {}
            }
        }
        stack.pop();
        marks.insert(n, Mark::Closed);
    }
    for n in plan.nodes.keys() {
        if !marks.contains_key(n.as_str()) {
            dfs(n, &succ, &mut marks, &mut Vec::new(), &mut cycles);
        }
    }
    cycles
}

/// Checks structure, port bindings, attributes and groups.
pub fn validate(plan: &DataPlan, registry: &OperatorRegistry) -> ValidationReport {
    use PlanViolationKind as K;
    let mut out = Vec::new();
    if !plan.nodes.contains_key(&plan.root) {
        out.push(PlanViolation::at(
            K::MissingRoot,
            &plan.root,
            format!("root `{}` is not a node", plan.root),
        ));
    }
    for e in &plan.edges {
        for end in [&e.from, &e.to] {
            if !plan.nodes.contains_key(end) {
                out.push(PlanViolation::at(
                    K::UnknownNode,
                    end,
                    format!("edge {} -> {} names unknown node `{end}`", e.from, e.to),
                ));
            }
        }
    }
    for cycle in find_cycles(plan) {
        out.push(PlanViolation {
            kind: K::Cycle,
            node: cycle.first().cloned(),
            port: None,
            message: format!("cycle: {} -> {}", cycle.join(" -> "), cycle[0]),
            nodes: cycle,
        });
    }
    let members: BTreeSet<&String> = plan.alternatives.values().flatten().collect();
    for (id, node) in &plan.nodes {
        let Some(d) = registry.get(&node.operator_id) else {
            out.push(PlanViolation::at(
                K::UnknownOperator,
                id,
                format!("node `{id}` uses unknown operator `{}`", node.operator_id),
            ));
            continue;
        };
        let mut by_port: BTreeMap<usize, usize> = BTreeMap::new();
        for e in plan.inputs(id) {
            *by_port.entry(e.port).or_default() += 1;
        }
        let arity = by_port.keys().next_back().map(|p| p + 1).unwrap_or(0);
        for (&p, &n) in &by_port {
            if n > 1 {
                out.push(PlanViolation {
                    port: Some(p),
                    ..PlanViolation::at(
                        K::DuplicatePort,
                        id,
                        format!("port {p} of node `{id}` has {n} incoming edges"),
                    )
                });
            }
            if d.input_ports.max.is_some_and(|m| p >= m) {
                out.push(PlanViolation {
                    port: Some(p),
                    ..PlanViolation::at(
                        K::DanglingPort,
                        id,
                        format!(
                            "edge into port {p} of node `{id}`, which takes {} input(s)",
                            d.input_ports
                        ),
                    )
                });
            }
        }
        for p in 0..arity.max(d.input_ports.min) {
            if !by_port.contains_key(&p) {
                out.push(PlanViolation {
                    port: Some(p),
                    ..PlanViolation::at(
                        K::DanglingPort,
                        id,
                        format!("port {p} of node `{id}` has no incoming edge"),
                    )
                });
            }
        }
        if let Err(problems) = d.validate_attributes(&node.attributes) {
            out.push(PlanViolation::at(
                K::Attributes,
                id,
                format!("node `{id}`: {}", problems.join("; ")),
            ));
        }
        let owner = plan.alternatives.contains_key(id);
        if d.kind != OperatorKind::Physical && !owner {
            out.push(PlanViolation::at(
                K::Unrefined,
                id,
                format!("node `{id}` ({}) has not been refined", d.operator_id),
            ));
        }
        if owner && node.status != NodeStatus::Refined {
            out.push(PlanViolation::at(
                K::Group,
                id,
                format!("owner `{id}` of an alternatives group is not marked refined"),
            ));
        }
        if members.contains(id) && !plan.consumers(id).is_empty() {
            out.push(PlanViolation::at(
                K::Group,
                id,
                format!("group member `{id}` must not have consumers"),
            ));
        }
    }
    for (g, ms) in &plan.alternatives {
        if !plan.nodes.contains_key(g) {
            out.push(PlanViolation::at(
                K::Group,
                g,
                format!("alternatives group `{g}` has no owner node"),
            ));
        }
        if ms.is_empty() {
            out.push(PlanViolation::at(
                K::Group,
                g,
                format!("alternatives group `{g}` is empty"),
            ));
        }
        for m in ms {
            if !plan.nodes.contains_key(m) {
                out.push(PlanViolation::at(
                    K::Group,
                    m,
                    format!("group `{g}` lists unknown member `{m}`"),
                ));
            }
        }
    }
    if plan.nodes.contains_key(&plan.root) {
        let reach = plan.ancestors(&plan.root);
        for id in plan.nodes.keys() {
            if !reach.contains(id) {
                out.push(PlanViolation::at(
                    K::Unreachable,
                    id,
                    format!("node `{id}` does not reach the root"),
                ));
            }
        }
    }
    ValidationReport { violations: out }
}
