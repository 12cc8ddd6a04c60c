use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Attributes, Properties};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Planned,
    Refined,
    Ready,
    Running,
    Suspended,
    Done,
    Failed,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::Planned => "planned",
            NodeStatus::Refined => "refined",
            NodeStatus::Ready => "ready",
            NodeStatus::Running => "running",
            NodeStatus::Suspended => "suspended",
            NodeStatus::Done => "done",
            NodeStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub operator_id: String,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(default)]
    pub properties: Properties,
    #[serde(default = "planned")]
    pub status: NodeStatus,
}

fn planned() -> NodeStatus {
    NodeStatus::Planned
}

impl PlanNode {
    pub fn new(operator_id: &str, attributes: Attributes) -> Self {
        PlanNode {
            operator_id: operator_id.to_string(),
            attributes,
            properties: Properties::new(),
            status: NodeStatus::Planned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub port: usize,
}

impl Edge {
    pub fn new(from: &str, to: &str, port: usize) -> Self {
        Edge {
            from: from.to_string(),
            to: to.to_string(),
            port,
        }
    }
}

/// The next-best member of an alternatives group, kept after selection so
/// the executor can swap it in when the chosen member fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    pub group: String,
    /// Root of the selected member this fallback stands in for.
    pub replaces: String,
    /// Nodes of the selected member; a failure in any of them triggers it.
    pub covers: Vec<String>,
    pub root: String,
    pub nodes: BTreeMap<String, PlanNode>,
    pub edges: Vec<Edge>,
}

/// A DAG of operator invocations. Alternatives groups are keyed by the id
/// of the refined node they replace; members list the roots of the
/// candidate subplans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub nodes: BTreeMap<String, PlanNode>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub alternatives: BTreeMap<String, Vec<String>>,
    pub root: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<Fallback>,
    /// Independent nodes grouped by level; nodes in one stage may run
    /// concurrently.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<Vec<String>>,
}

impl DataPlan {
    pub fn single(node_id: &str, node: PlanNode) -> Self {
        DataPlan {
            nodes: BTreeMap::from([(node_id.to_string(), node)]),
            root: node_id.to_string(),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("plan JSON", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn node(&self, id: &str) -> Result<&PlanNode> {
        self.nodes.get(id).ok_or_else(|| Error::not_found("plan node", id))
    }

    /// Incoming edges of `id`, ordered by port.
    pub fn inputs(&self, id: &str) -> Vec<&Edge> {
        let mut v: Vec<&Edge> = self.edges.iter().filter(|e| e.to == id).collect();
        v.sort_by_key(|e| e.port);
        v
    }

    pub fn consumers(&self, id: &str) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.from == id).collect()
    }

    /// Group whose member list contains `root`.
    pub fn group_of_member(&self, root: &str) -> Option<&str> {
        self.alternatives
            .iter()
            .find(|(_, m)| m.iter().any(|r| r == root))
            .map(|(g, _)| g.as_str())
    }

    /// Producers of `id`: edge sources plus, for a group owner, its member
    /// roots.
    pub fn dependencies(&self, id: &str) -> Vec<String> {
        let mut deps: Vec<String> = self.inputs(id).into_iter().map(|e| e.from.clone()).collect();
        if let Some(members) = self.alternatives.get(id) {
            deps.extend(members.iter().cloned());
        }
        deps
    }

    /// `id` and everything it transitively depends on.
    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([id.to_string()]);
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n.clone()) {
                continue;
            }
            for d in self.dependencies(&n) {
                queue.push_back(d);
            }
        }
        seen
    }

    /// Drops nodes (and their edges) that no longer contribute to the root.
    pub fn prune(&mut self) {
        let keep = self.ancestors(&self.root.clone());
        self.nodes.retain(|id, _| keep.contains(id));
        self.edges.retain(|e| keep.contains(&e.from) && keep.contains(&e.to));
        self.alternatives.retain(|g, _| keep.contains(g));
    }

    /// Kahn order over edges and owner dependencies; `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<String>> {
        let mut indeg: BTreeMap<String, usize> = self.nodes.keys().map(|k| (k.clone(), 0)).collect();
        let mut out_adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let pairs = self.edges.iter().map(|e| (e.from.clone(), e.to.clone())).chain(
            self.alternatives
                .iter()
                .flat_map(|(g, ms)| ms.iter().map(move |m| (m.clone(), g.clone()))),
        );
        for (from, to) in pairs {
            if self.nodes.contains_key(&from) && self.nodes.contains_key(&to) {
                *indeg.get_mut(&to).unwrap() += 1;
                out_adj.entry(from).or_default().push(to);
            }
        }
        let mut ready: VecDeque<String> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| k.clone()).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_front() {
            for m in out_adj.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push_back(m.clone());
                }
            }
            order.push(n);
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Topological levels: a node's level is one more than its deepest
    /// producer's.
    pub fn levels(&self) -> Option<Vec<Vec<String>>> {
        let order = self.topo_order()?;
        let mut level: BTreeMap<String, usize> = BTreeMap::new();
        let mut out: Vec<Vec<String>> = Vec::new();
        for n in order {
            let l = self
                .dependencies(&n)
                .iter()
                .filter_map(|d| level.get(d))
                .map(|l| l + 1)
                .max()
                .unwrap_or(0);
            level.insert(n.clone(), l);
            if out.len() <= l {
                out.resize(l + 1, Vec::new());
            }
            out[l].push(n);
        }
        for s in &mut out {
            s.sort();
        }
        Some(out)
    }
}
