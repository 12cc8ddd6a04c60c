//! Plan execution over a session: topological waves, node cache, prompt
//! suspension and optional fallback to a recorded runner-up.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::canonical::{digest, digest_of};
use crate::error::{Error, ErrorBody, Result};
use crate::operators::{invoke, ExecCtx, OpOutcome, OperatorInvocation};
use crate::planner::{validate, DataPlan, NodeStatus};
use crate::registry::OperatorRegistry;
use crate::session::{MessageKind, Session};
use crate::sources::{AnswerOutcome, SourceManager};
use crate::value::{DataBatch, Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecOptions {
    pub node_cache: bool,
    /// Swap in the planner's runner-up when a selected member fails.
    pub fallback: bool,
    /// Run the nodes of one wave on separate threads.
    pub concurrent: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            node_cache: true,
            fallback: false,
            concurrent: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStatus {
    Running,
    Suspended,
    Done,
    Failed,
}

impl PlanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanStatus::Running => "running",
            PlanStatus::Suspended => "suspended",
            PlanStatus::Done => "done",
            PlanStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl NodeRecord {
    fn ready() -> Self {
        NodeRecord {
            status: NodeStatus::Ready,
            started_at: None,
            finished_at: None,
            output_digest: None,
            rows: None,
            cache_hit: false,
            prompt_id: None,
            error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub plan_id: String,
    pub status: PlanStatus,
    pub nodes: BTreeMap<String, NodeRecord>,
    #[serde(rename = "final", default, skip_serializing_if = "Option::is_none")]
    pub final_batch: Option<DataBatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

/// Outputs of pure nodes keyed by invocation digest.
#[derive(Debug, Default)]
pub struct NodeCache {
    entries: RwLock<BTreeMap<String, DataBatch>>,
    hits: AtomicU64,
}

impl NodeCache {
    pub fn get(&self, key: &str) -> Option<DataBatch> {
        let hit = self.entries.read().unwrap().get(key).cloned();
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    pub fn put(&self, key: String, batch: DataBatch) {
        self.entries.write().unwrap().insert(key, batch);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.entries.write().unwrap().clear();
    }

    pub fn snapshot(&self) -> BTreeMap<String, DataBatch> {
        self.entries.read().unwrap().clone()
    }

    pub fn restore(&self, entries: BTreeMap<String, DataBatch>) {
        self.entries.write().unwrap().extend(entries);
    }
}

/// A plan in flight. Kept by the engine between a suspension and the answer
/// that resumes it.
#[derive(Clone, Debug)]
pub struct PlanRun {
    pub plan_id: String,
    pub session_id: String,
    pub plan: DataPlan,
    pub record: ExecutionRecord,
    outputs: BTreeMap<String, DataBatch>,
    /// Open prompt id to the node waiting on it.
    waiting: BTreeMap<String, String>,
}

impl PlanRun {
    pub fn waiting_prompts(&self) -> Vec<String> {
        self.waiting.keys().cloned().collect()
    }

    pub fn final_batch(&self) -> Option<&DataBatch> {
        self.record.final_batch.as_ref()
    }
}

pub struct Executor<'a> {
    pub registry: &'a OperatorRegistry,
    pub sources: &'a SourceManager,
    pub cache: &'a NodeCache,
    pub options: ExecOptions,
}

type NodeResult = Result<(OpOutcome, bool)>;

impl<'a> Executor<'a> {
    pub fn new(
        registry: &'a OperatorRegistry,
        sources: &'a SourceManager,
        cache: &'a NodeCache,
        options: ExecOptions,
    ) -> Self {
        Executor {
            registry,
            sources,
            cache,
            options,
        }
    }

    fn now(&self) -> i64 {
        self.sources.users().clock().now_ms()
    }

    /// Checks the plan and runs it as far as it goes without an answer.
    pub fn execute(&self, plan_id: &str, plan: DataPlan, session: &Session) -> Result<PlanRun> {
        if !plan.alternatives.is_empty() {
            return Err(Error::invalid(
                "plan",
                "alternatives must be resolved by optimize() before execution",
            ));
        }
        let report = validate(&plan, self.registry);
        if !report.is_empty() {
            return Err(Error::InvalidPlan(report));
        }
        session.ensure_open()?;
        let record = ExecutionRecord {
            plan_id: plan_id.to_string(),
            status: PlanStatus::Running,
            nodes: plan.nodes.keys().map(|k| (k.clone(), NodeRecord::ready())).collect(),
            final_batch: None,
            final_digest: None,
            error: None,
        };
        let mut run = PlanRun {
            plan_id: plan_id.to_string(),
            session_id: session.session_id.clone(),
            plan,
            record,
            outputs: BTreeMap::new(),
            waiting: BTreeMap::new(),
        };
        self.plan_status(&run, session);
        self.advance(&mut run, session);
        Ok(run)
    }

    fn plan_status(&self, run: &PlanRun, session: &Session) {
        let mut payload = json!({"status": run.record.status.as_str(), "plan_id": run.plan_id});
        if let Some(d) = &run.record.final_digest {
            payload["digest"] = json!(d);
            payload["rows"] = json!(run.record.final_batch.as_ref().map_or(0, DataBatch::row_count));
        }
        session.emit(MessageKind::Status, None, payload);
    }

    fn node_status(&self, run: &PlanRun, session: &Session, node: &str, status: NodeStatus) {
        session.emit(
            MessageKind::Status,
            Some(node),
            json!({"status": status.as_str(), "plan_id": run.plan_id}),
        );
    }

    /// Input batch of a node: the first table of each producer, by port.
    fn input_of(run: &PlanRun, id: &str) -> DataBatch {
        let tables = run
            .plan
            .inputs(id)
            .into_iter()
            .map(|e| {
                run.outputs
                    .get(&e.from)
                    .and_then(|b| b.tables.first().cloned())
                    .unwrap_or_else(|| Table::new(Vec::new()))
            })
            .collect();
        DataBatch { tables }
    }

    fn cache_key(&self, inv: &OperatorInvocation) -> Result<Option<String>> {
        if !self.options.node_cache || inv.properties.get("cache").and_then(Value::as_bool) == Some(false) {
            return Ok(None);
        }
        if !self.registry.get(&inv.operator_id).is_some_and(|d| d.pure) {
            return Ok(None);
        }
        let mut props = inv.properties.clone();
        props.remove("cache");
        let inputs: Result<Vec<String>> = inv
            .input
            .tables
            .iter()
            .map(|t| digest(&DataBatch::single(t.clone())))
            .collect();
        Ok(Some(digest_of(&json!({
            "operator_id": inv.operator_id,
            "attributes": inv.attributes,
            "properties": props,
            "inputs": inputs?,
        }))?))
    }

    fn run_node(&self, session: &Session, id: &str, inv: &OperatorInvocation) -> NodeResult {
        let key = self.cache_key(inv)?;
        if let Some(hit) = key.as_deref().and_then(|k| self.cache.get(k)) {
            return Ok((OpOutcome::Done(hit), true));
        }
        let ctx = ExecCtx::new(self.sources).with_session(session).with_node(id);
        let out = invoke(self.registry, &ctx, inv)?;
        if let (Some(k), OpOutcome::Done(b)) = (key, &out) {
            self.cache.put(k, b.clone());
        }
        Ok((out, false))
    }

    fn is_settled(status: NodeStatus) -> bool {
        matches!(
            status,
            NodeStatus::Done | NodeStatus::Failed | NodeStatus::Suspended | NodeStatus::Running
        )
    }

    /// Runs waves of ready nodes until none is left.
    fn advance(&self, run: &mut PlanRun, session: &Session) {
        while run.record.status == PlanStatus::Running {
            if session.is_closed() {
                self.fail_plan(
                    run,
                    session,
                    None,
                    &Error::Cancelled(format!("session `{}` closed", session.session_id)),
                );
                return;
            }
            let ready: Vec<String> = run
                .plan
                .nodes
                .keys()
                .filter(|id| !Self::is_settled(run.record.nodes[*id].status))
                .filter(|id| {
                    run.plan
                        .dependencies(id)
                        .iter()
                        .all(|d| run.record.nodes.get(d).is_some_and(|r| r.status == NodeStatus::Done))
                })
                .cloned()
                .collect();
            if ready.is_empty() {
                self.settle(run, session);
                return;
            }
            let mut jobs = Vec::with_capacity(ready.len());
            for id in &ready {
                let node = &run.plan.nodes[id];
                let inv = OperatorInvocation {
                    operator_id: node.operator_id.clone(),
                    input: Self::input_of(run, id),
                    attributes: node.attributes.clone(),
                    properties: node.properties.clone(),
                };
                let rec = run.record.nodes.get_mut(id).unwrap();
                rec.status = NodeStatus::Running;
                rec.started_at = Some(self.now());
                self.node_status(run, session, id, NodeStatus::Running);
                jobs.push((id.clone(), inv));
            }
            let results: Vec<(String, NodeResult)> = if self.options.concurrent && jobs.len() > 1 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = jobs
                        .iter()
                        .map(|(id, inv)| (id.clone(), s.spawn(move || self.run_node(session, id, inv))))
                        .collect();
                    handles
                        .into_iter()
                        .map(|(id, h)| {
                            let r = h
                                .join()
                                .unwrap_or_else(|_| Err(Error::Internal(format!("node `{id}` panicked"))));
                            (id, r)
                        })
                        .collect()
                })
            } else {
                jobs.iter()
                    .map(|(id, inv)| (id.clone(), self.run_node(session, id, inv)))
                    .collect()
            };
            for (id, result) in results {
                if run.record.status != PlanStatus::Running || !run.plan.nodes.contains_key(&id) {
                    // the plan failed or a fallback replaced this node earlier in the wave
                    run.record.nodes.get_mut(&id).unwrap().status = NodeStatus::Ready;
                    continue;
                }
                match result {
                    Ok((OpOutcome::Done(batch), hit)) => self.complete(run, session, &id, batch, hit),
                    Ok((OpOutcome::Suspended { prompt_id }, _)) => {
                        let rec = run.record.nodes.get_mut(&id).unwrap();
                        rec.status = NodeStatus::Suspended;
                        rec.prompt_id = Some(prompt_id.clone());
                        run.waiting.insert(prompt_id, id.clone());
                        self.node_status(run, session, &id, NodeStatus::Suspended);
                    }
                    Err(e) => self.node_failed(run, session, &id, e),
                }
            }
        }
    }

    fn complete(&self, run: &mut PlanRun, session: &Session, id: &str, batch: DataBatch, cache_hit: bool) {
        let d = match digest(&batch) {
            Ok(d) => d,
            Err(e) => return self.node_failed(run, session, id, e),
        };
        let rows = batch.row_count();
        let now = self.now();
        let rec = run.record.nodes.get_mut(id).unwrap();
        rec.status = NodeStatus::Done;
        rec.finished_at = Some(now);
        rec.output_digest = Some(d.clone());
        rec.rows = Some(rows);
        rec.cache_hit = cache_hit;
        rec.prompt_id = None;
        run.outputs.insert(id.to_string(), batch);
        self.node_status(run, session, id, NodeStatus::Done);
        session.emit(
            MessageKind::Data,
            Some(id),
            json!({"digest": d, "rows": rows, "cache_hit": cache_hit, "plan_id": run.plan_id}),
        );
    }

    /// Decides the plan status once no node can start.
    fn settle(&self, run: &mut PlanRun, session: &Session) {
        let root = run.plan.root.clone();
        if run
            .record
            .nodes
            .get(&root)
            .is_some_and(|r| r.status == NodeStatus::Done)
        {
            let batch = run.outputs[&root].clone();
            run.record.final_digest = run.record.nodes[&root].output_digest.clone();
            run.record.final_batch = Some(batch);
            run.record.status = PlanStatus::Done;
        } else if !run.waiting.is_empty() {
            run.record.status = PlanStatus::Suspended;
        } else {
            let e = Error::Internal(format!("plan `{}` stalled before its root", run.plan_id));
            return self.fail_plan(run, session, None, &e);
        }
        self.plan_status(run, session);
    }

    fn node_failed(&self, run: &mut PlanRun, session: &Session, id: &str, e: Error) {
        let now = self.now();
        let rec = run.record.nodes.get_mut(id).unwrap();
        rec.status = NodeStatus::Failed;
        rec.finished_at = Some(now);
        rec.error = Some(ErrorBody::from(&e));
        rec.prompt_id = None;
        self.node_status(run, session, id, NodeStatus::Failed);
        session.emit(
            MessageKind::Error,
            Some(id),
            serde_json::to_value(ErrorBody::from(&e)).unwrap_or_default(),
        );
        if self.options.fallback && self.apply_fallback(run, session, id) {
            return;
        }
        self.fail_plan(run, session, Some(id), &e);
    }

    fn fail_plan(&self, run: &mut PlanRun, session: &Session, node: Option<&str>, e: &Error) {
        if node.is_none() {
            session.emit(
                MessageKind::Error,
                None,
                serde_json::to_value(ErrorBody::from(e)).unwrap_or_default(),
            );
        }
        run.record.status = PlanStatus::Failed;
        run.record.error = Some(ErrorBody::from(e));
        run.waiting.clear();
        self.plan_status(run, session);
    }

    /// Replaces the failed member by its group's runner-up.
    fn apply_fallback(&self, run: &mut PlanRun, session: &Session, failed: &str) -> bool {
        let Some(pos) = run
            .plan
            .fallbacks
            .iter()
            .position(|f| f.covers.iter().any(|c| c == failed))
        else {
            return false;
        };
        let fb = run.plan.fallbacks.remove(pos);
        if fb.nodes.keys().any(|k| run.plan.nodes.contains_key(k)) {
            return false;
        }
        let new_ids: BTreeSet<String> = fb.nodes.keys().cloned().collect();
        for (id, n) in fb.nodes {
            run.plan.nodes.insert(id.clone(), n);
            run.record.nodes.insert(id, NodeRecord::ready());
        }
        for e in &mut run.plan.edges {
            if e.from == fb.replaces && !new_ids.contains(&e.to) {
                e.from = fb.root.clone();
            }
        }
        if run.plan.root == fb.replaces {
            run.plan.root = fb.root.clone();
        }
        run.plan.edges.extend(fb.edges);
        run.plan.prune();
        run.waiting.retain(|_, n| run.plan.nodes.contains_key(n));
        run.outputs.retain(|n, _| run.plan.nodes.contains_key(n));
        session.emit(
            MessageKind::Control,
            Some(failed),
            json!({
                "action": "fallback",
                "plan_id": run.plan_id,
                "group": fb.group,
                "replaces": fb.replaces,
                "root": fb.root,
            }),
        );
        true
    }

    /// Feeds an answer to the node waiting on `prompt_id` and continues.
    /// An unknown prompt leaves the run untouched.
    pub fn resume_with_answer(
        &self,
        run: &mut PlanRun,
        session: &Session,
        prompt_id: &str,
        answer: &serde_json::Value,
    ) -> Result<()> {
        let Some(node) = run.waiting.get(prompt_id).cloned() else {
            return Err(Error::not_found("prompt", prompt_id));
        };
        match self.sources.users().submit_answer(session, prompt_id, answer)? {
            AnswerOutcome::Accepted(table) => {
                run.waiting.remove(prompt_id);
                if run.record.status == PlanStatus::Suspended {
                    run.record.status = PlanStatus::Running;
                    self.plan_status(run, session);
                }
                self.complete(run, session, &node, DataBatch::single(table), false);
                self.advance(run, session);
            }
            AnswerOutcome::Reprompted { prompt_id: next, .. } => {
                run.waiting.remove(prompt_id);
                run.waiting.insert(next.clone(), node.clone());
                run.record.nodes.get_mut(&node).unwrap().prompt_id = Some(next);
            }
            AnswerOutcome::Failed(e) => {
                run.waiting.remove(prompt_id);
                let was_suspended = run.record.status == PlanStatus::Suspended;
                if was_suspended {
                    run.record.status = PlanStatus::Running;
                }
                self.node_failed(run, session, &node, e);
                if run.record.status == PlanStatus::Running {
                    self.advance(run, session);
                }
            }
        }
        Ok(())
    }
}
