//! Plan construction: instantiation and recursive refinement.

use std::collections::{BTreeMap, BTreeSet};

use super::plan::{DataPlan, Edge, NodeStatus, PlanNode};
use crate::error::{Error, Result};
use crate::operators::{invoke, ExecCtx, OperatorInvocation};
use crate::registry::{
    embed, score_entry, tokenize, Attributes, Binding, EdgeSource, OperatorKind, OperatorRegistry, Protocol,
    RefinementRule, RefinementTemplate, SubplanTemplate,
};
use crate::sources::SourceManager;
use crate::value::{DataBatch, Row, Table, Value};

pub const DEFAULT_MAX_DEPTH: u32 = 8;

/// Protocols a breakdown may route sub-questions to.
const BREAKDOWN_PROTOCOLS: &[Protocol] = &[Protocol::Relational, Protocol::Llm, Protocol::User, Protocol::Vector];

fn initial_status(kind: OperatorKind) -> NodeStatus {
    match kind {
        OperatorKind::Physical => NodeStatus::Ready,
        _ => NodeStatus::Planned,
    }
}

/// A one-node plan for `operator_id`, with validated attributes.
pub fn instantiate(registry: &OperatorRegistry, operator_id: &str, attributes: Attributes) -> Result<DataPlan> {
    let d = registry.descriptor(operator_id)?;
    let attrs = d
        .validate_attributes(&attributes)
        .map_err(|p| Error::invalid(format!("attributes of `{operator_id}`"), p.join("; ")))?;
    let mut node = PlanNode::new(operator_id, attrs);
    node.status = initial_status(d.kind);
    Ok(DataPlan::single("n0", node))
}

/// Why a node could not be refined.
enum Failure {
    /// No alternative survived; the enclosing alternative is dropped.
    Drop(String),
    /// Aborts refinement of the whole plan.
    Fatal(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

pub struct Refiner<'a> {
    registry: &'a OperatorRegistry,
    sources: &'a SourceManager,
    max_depth: u32,
    plan: DataPlan,
    /// Warnings about dropped alternatives, for explain output.
    pub notes: Vec<String>,
}

impl<'a> Refiner<'a> {
    pub fn new(registry: &'a OperatorRegistry, sources: &'a SourceManager, plan: DataPlan, max_depth: u32) -> Self {
        Refiner {
            registry,
            sources,
            max_depth,
            plan,
            notes: Vec::new(),
        }
    }

    fn kind(&self, op: &str) -> Result<OperatorKind> {
        Ok(self.registry.descriptor(op)?.kind)
    }

    /// Refines every unrefined node reachable from the root.
    pub fn run(mut self) -> Result<(DataPlan, Vec<String>)> {
        let pending: Vec<String> = self
            .plan
            .nodes
            .iter()
            .filter(|(id, n)| n.status != NodeStatus::Refined && !self.plan.alternatives.contains_key(*id))
            .map(|(id, _)| id.clone())
            .collect();
        for id in pending {
            let op = self.plan.nodes[&id].operator_id.clone();
            if self.kind(&op)? == OperatorKind::Physical {
                continue;
            }
            match self.refine_node(&id, 0) {
                Ok(()) => {}
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Drop(why)) => {
                    return Err(Error::Refinement(format!(
                        "node `{id}` has no usable alternative: {why}"
                    )))
                }
            }
        }
        Ok((self.plan, self.notes))
    }

    fn refine_node(&mut self, id: &str, depth: u32) -> std::result::Result<(), Failure> {
        let node = self.plan.nodes[id].clone();
        if depth >= self.max_depth {
            return Err(Failure::Fatal(Error::DepthExceeded {
                node: id.to_string(),
                operator: node.operator_id.clone(),
                depth: self.max_depth,
            }));
        }
        let d = self.registry.descriptor(&node.operator_id)?;
        let mut members = Vec::new();
        let mut reasons = Vec::new();
        for rule in &d.refinements {
            let saved = self.plan.clone();
            let built = match &rule.produces {
                RefinementTemplate::Subplan(t) => self.apply_template(id, &node, rule, t),
                RefinementTemplate::Breakdown => self.apply_breakdown(id, &node),
            };
            let outcome = built.and_then(|created| match created {
                None => Ok(None),
                Some((root, new_nodes)) => {
                    for n in &new_nodes {
                        let op = self.plan.nodes[n].operator_id.clone();
                        if self.kind(&op)? != OperatorKind::Physical {
                            self.refine_node(n, depth + 1)?;
                        }
                    }
                    Ok(Some(root))
                }
            });
            match outcome {
                Ok(Some(root)) => members.push(root),
                Ok(None) => reasons.push(format!("rule `{}` does not apply", rule.rule_id)),
                Err(Failure::Drop(why)) => {
                    self.plan = saved;
                    let note = format!("dropped alternative `{}` of `{id}`: {why}", rule.rule_id);
                    tracing::warn!("{note}");
                    self.notes.push(note);
                    reasons.push(why);
                }
                Err(f) => return Err(f),
            }
        }
        if members.is_empty() {
            return Err(Failure::Drop(if reasons.is_empty() {
                format!("`{}` has no refinement rules", node.operator_id)
            } else {
                reasons.join("; ")
            }));
        }
        self.plan.nodes.get_mut(id).unwrap().status = NodeStatus::Refined;
        self.plan.alternatives.insert(id.to_string(), members);
        Ok(())
    }

    fn add_node(&mut self, id: &str, op: &str, attrs: Attributes, parent: &PlanNode) -> Result<()> {
        let d = self
            .registry
            .get(op)
            .ok_or_else(|| Error::Refinement(format!("refinement template references unknown operator `{op}`")))?;
        let mut n = PlanNode::new(op, attrs);
        n.properties = parent.properties.clone();
        n.properties.remove("required_sources");
        n.status = initial_status(d.kind);
        if self.plan.nodes.insert(id.to_string(), n).is_some() {
            return Err(Error::Internal(format!("refinement produced duplicate node id `{id}`")));
        }
        Ok(())
    }

    /// Source ids the parent allows, when it restricts them.
    fn allowed(parent: &PlanNode) -> Option<BTreeSet<String>> {
        parent
            .attributes
            .get("source_ids")
            .and_then(Value::as_list)
            .map(|l| l.iter().filter_map(Value::as_str).map(str::to_string).collect())
    }

    /// The registered source of `protocol` whose metadata best matches the
    /// question; ties go to the smaller id.
    fn select_source(&self, parent: &PlanNode, protocol: Protocol) -> Option<String> {
        let allowed = Self::allowed(parent);
        let question = parent
            .attributes
            .get("question")
            .and_then(Value::as_str)
            .unwrap_or_default();
        let q_tokens: BTreeSet<String> = tokenize(question).into_iter().collect();
        let q_embed = embed(question);
        let reg = self.sources.registry();
        reg.sources_with(protocol)
            .into_iter()
            .filter(|s| allowed.as_ref().is_none_or(|a| a.contains(&s.source_id)))
            .map(|s| {
                let best = reg
                    .subtree(&s.source_id)
                    .iter()
                    .map(|e| score_entry(&q_tokens, &q_embed, e))
                    .fold(0.0f64, f64::max);
                (best, s.source_id)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
            .map(|(_, id)| id)
    }

    fn candidate_sources(&self, parent: &PlanNode) -> Vec<String> {
        let allowed = Self::allowed(parent);
        self.sources
            .registry()
            .list_sources()
            .into_iter()
            .filter(|s| BREAKDOWN_PROTOCOLS.contains(&s.protocol))
            .filter(|s| allowed.as_ref().is_none_or(|a| a.contains(&s.source_id)))
            .map(|s| s.source_id)
            .collect()
    }

    /// Evaluates the bindings of one template node; `None` when the rule
    /// cannot apply to this parent.
    fn bind(&self, parent: &PlanNode, bindings: &BTreeMap<String, Binding>) -> Option<Attributes> {
        let mut out = Attributes::new();
        for (name, b) in bindings {
            let v = match b {
                Binding::Const(v) => Some(v.clone()),
                Binding::Parent(p) => parent.attributes.get(p).filter(|v| !v.is_null()).cloned(),
                Binding::Require(p) => Some(parent.attributes.get(p).filter(|v| !v.is_null()).cloned()?),
                Binding::SelectSource(proto) => Some(Value::from(self.select_source(parent, *proto)?)),
                Binding::CandidateSources => {
                    let c = self.candidate_sources(parent);
                    if c.len() < 2 {
                        return None;
                    }
                    Some(Value::from(c))
                }
            };
            if let Some(v) = v {
                out.insert(name.clone(), v);
            }
        }
        Some(out)
    }

    /// Adds the template's nodes; returns the member root and the new ids.
    fn apply_template(
        &mut self,
        id: &str,
        parent: &PlanNode,
        rule: &RefinementRule,
        t: &SubplanTemplate,
    ) -> std::result::Result<Option<(String, Vec<String>)>, Failure> {
        let node_id = |tpl: &str| {
            if t.nodes.len() == 1 {
                format!("{id}.{}", rule.rule_id)
            } else {
                format!("{id}.{}.{tpl}", rule.rule_id)
            }
        };
        let mut bound = Vec::new();
        for tn in &t.nodes {
            let Some(attrs) = self.bind(parent, &tn.attributes) else {
                return Ok(None);
            };
            let d = self.registry.get(&tn.operator_id).ok_or_else(|| {
                Error::Refinement(format!(
                    "rule `{}` of `{}` references unknown operator `{}`",
                    rule.rule_id, parent.operator_id, tn.operator_id
                ))
            })?;
            match d.validate_attributes(&attrs) {
                Ok(a) => bound.push((node_id(&tn.id), tn.operator_id.clone(), a)),
                Err(problems) => {
                    return Err(Failure::Drop(format!(
                        "rule `{}`: {}",
                        rule.rule_id,
                        problems.join("; ")
                    )))
                }
            }
        }
        let parent_inputs: Vec<Edge> = self.plan.inputs(id).into_iter().cloned().collect();
        let mut ids = Vec::new();
        for (nid, op, attrs) in bound {
            self.add_node(&nid, &op, attrs, parent)?;
            ids.push(nid);
        }
        for e in &t.edges {
            let from = match &e.from {
                EdgeSource::Node(n) => node_id(n),
                EdgeSource::ParentInput(p) => match parent_inputs.iter().find(|pe| pe.port == *p) {
                    Some(pe) => pe.from.clone(),
                    None => continue,
                },
            };
            self.plan.edges.push(Edge::new(&from, &node_id(&e.to), e.port));
        }
        Ok(Some((node_id(&t.output), ids)))
    }

    /// Runs the node's operator now to get sub-questions, then adds one
    /// branch per row chained by the declared integrations.
    fn apply_breakdown(
        &mut self,
        id: &str,
        parent: &PlanNode,
    ) -> std::result::Result<Option<(String, Vec<String>)>, Failure> {
        let inv = OperatorInvocation {
            operator_id: parent.operator_id.clone(),
            input: DataBatch::empty(),
            attributes: parent.attributes.clone(),
            properties: parent.properties.clone(),
        };
        let table = match invoke(self.registry, &ExecCtx::new(self.sources), &inv).and_then(|o| o.into_batch()) {
            Ok(b) => b.tables.into_iter().next().unwrap_or_default(),
            Err(e) => return Err(Failure::Drop(format!("breakdown call failed: {e}"))),
        };
        if table.is_empty() {
            return Err(Failure::Drop("breakdown returned no sub-questions".into()));
        }
        let base = format!("{id}.bd");
        let mut ids = Vec::new();
        let mut acc: Option<String> = None;
        let mut targets = BTreeSet::new();
        for (i, row) in table.rows.iter().enumerate() {
            let q_id = format!("{base}.q{i}");
            let (op, attrs) = self.sub_question(row)?;
            targets.insert(
                row.get("target")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
            );
            self.add_node(&q_id, &op, attrs, parent)?;
            ids.push(q_id.clone());
            let Some(prev) = acc.clone() else {
                acc = Some(q_id);
                continue;
            };
            let i_id = format!("{base}.i{i}");
            let s = |k: &str| row.get(k).and_then(Value::as_str).map(str::to_string);
            let (op, attrs): (&str, Attributes) = match s("integrate").as_deref() {
                Some("in") => {
                    let key = s("key").unwrap_or_default();
                    (
                        "in_filter",
                        [
                            ("key".into(), Value::from(key.clone())),
                            ("member_key".into(), Value::from(key)),
                        ]
                        .into(),
                    )
                }
                Some("union") => ("union", Attributes::new()),
                _ => {
                    let mut a = Attributes::new();
                    if let Some(k) = s("key") {
                        a.insert("left_key".into(), Value::from(k.clone()));
                        a.insert("right_key".into(), Value::from(k));
                    }
                    if let Some(p) = s("predicate") {
                        a.insert("predicate".into(), Value::from(p));
                    }
                    ("join", a)
                }
            };
            let attrs = self
                .registry
                .descriptor(op)?
                .validate_attributes(&attrs)
                .map_err(|p| Failure::Drop(format!("sub-question {i}: {}", p.join("; "))))?;
            self.add_node(&i_id, op, attrs, parent)?;
            self.plan.edges.push(Edge::new(&prev, &i_id, 0));
            self.plan.edges.push(Edge::new(&q_id, &i_id, 1));
            ids.push(i_id.clone());
            acc = Some(i_id);
        }
        // every owner enclosing this node should prefer members covering
        // all the sources the breakdown found necessary
        let required: Vec<Value> = targets.iter().map(|t| Value::from(t.as_str())).collect();
        let owners: Vec<String> = self
            .plan
            .nodes
            .keys()
            .filter(|k| *k == id || id.starts_with(&format!("{k}.")))
            .cloned()
            .collect();
        for o in owners {
            let props = &mut self.plan.nodes.get_mut(&o).unwrap().properties;
            let mut merged: BTreeSet<Value> = props
                .get("required_sources")
                .and_then(Value::as_list)
                .map(|l| l.iter().cloned().collect())
                .unwrap_or_default();
            merged.extend(required.iter().cloned());
            props.insert("required_sources".into(), Value::List(merged.into_iter().collect()));
        }
        Ok(Some((acc.expect("non-empty breakdown"), ids)))
    }

    /// Operator and attributes answering one breakdown row.
    fn sub_question(&self, row: &Row) -> std::result::Result<(String, Attributes), Failure> {
        let s = |k: &str| row.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        let question = s("sub_question");
        let target = s("target");
        let schema = row.get("output_schema").filter(|v| !v.is_null()).cloned();
        let protocol = self
            .sources
            .registry()
            .source(&target)
            .map(|d| d.protocol)
            .ok_or_else(|| Failure::Drop(format!("sub-question targets unknown source `{target}`")))?;
        let mut a = Attributes::new();
        a.insert("question".into(), Value::from(question.clone()));
        let op = match protocol {
            Protocol::User => {
                a.insert("source_id".into(), Value::from(target));
                if let Some(sc) = schema {
                    a.insert("output_schema".into(), sc);
                }
                "nl2u"
            }
            Protocol::Vector => {
                let collection = self
                    .sources
                    .registry()
                    .collections(&target)
                    .first()
                    .map(|c| c.name().to_string())
                    .ok_or_else(|| Failure::Drop(format!("vector source `{target}` has no synced collection")))?;
                a.insert("source_id".into(), Value::from(target));
                a.insert("collection".into(), Value::from(collection));
                "nl2vec"
            }
            _ => {
                a.insert("source_ids".into(), Value::from(vec![target]));
                if let Some(sc) = schema {
                    a.insert("output_schema".into(), sc);
                }
                "question_answer"
            }
        };
        let attrs = self
            .registry
            .descriptor(op)?
            .validate_attributes(&a)
            .map_err(|p| Failure::Drop(format!("sub-question `{question}`: {}", p.join("; "))))?;
        Ok((op.to_string(), attrs))
    }
}

/// Expands every abstract or compound node into an alternatives group, down
/// to physical leaves. Alternatives that cannot be built are dropped.
pub fn refine(
    registry: &OperatorRegistry,
    sources: &SourceManager,
    plan: DataPlan,
    max_depth: u32,
) -> Result<DataPlan> {
    Ok(Refiner::new(registry, sources, plan, max_depth).run()?.0)
}

/// The sub-question table a breakdown node would produce, for explain output.
pub fn breakdown_rows(plan: &DataPlan, node_id: &str) -> Table {
    let prefix = format!("{node_id}.bd.q");
    let rows = plan
        .nodes
        .iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .map(|(k, n)| {
            let mut r = Row::new();
            r.insert("node_id", k.as_str());
            r.insert("operator_id", n.operator_id.as_str());
            r.insert("question", n.attributes.get("question").cloned().unwrap_or(Value::Null));
            r
        })
        .collect();
    Table::new(rows)
}
