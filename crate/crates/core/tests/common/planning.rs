use std::collections::BTreeMap;

use dil_core::executor::ExecOptions;
use dil_core::planner::DataPlan;
use dil_core::registry::{AttributeSpec, Binding, OperatorDescriptor, OperatorKind, PortRange, RefinementRule};
use dil_core::{DeclaredType, Engine, Value};
use serde_json::json;

/// Plausible attributes for instantiating any bootstrap operator over the
/// fixture sources.
pub fn sample_attributes(op: &str) -> BTreeMap<String, Value> {
    let j = match op {
        "project" => json!({"columns": ["id"]}),
        "filter" => json!({"predicate": "id > 1"}),
        "join" => json!({"left_key": "id", "right_key": "id"}),
        "in_filter" => json!({"key": "location", "member_key": "location"}),
        "union" | "sort_limit" => json!({}),
        "group_agg" => json!({"aggs": [{"fn": "count", "as": "n"}]}),
        "values" => json!({"rows": [{"a": 1}]}),
        "sql_scan" => json!({"source_id": "jobs_db", "statement": "SELECT * FROM jobs"}),
        "extract" | "extraction" => json!({"column": "title", "dictionary": ["Scientist"], "as": "hit"}),
        "nl2sql" => json!({"question": "what are data scientist jobs?", "source_id": "jobs_db"}),
        "nl2llm" => json!({"question": "which locations are considered Bay Area?", "source_id": "llm"}),
        "nl2u" => json!({"question": "what jobs are suitable for me?", "source_id": "user"}),
        "nl2vec" => json!({"question": "pasta", "source_id": "recipes_vec", "collection": "recipes"}),
        "web_extract" => json!({
            "source_id": "web",
            "key": "https://listings.example/bay-area-apartments",
            "output_schema": {"rent": "integer"}
        }),
        "query_breakdown" => json!({"question": super::BAY_AREA_QUESTION, "source_ids": ["jobs_db", "llm", "user"]}),
        "question_answer" => json!({"question": super::BAY_AREA_QUESTION}),
        other => panic!("no sample attributes for `{other}`; add one"),
    };
    j.as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), Value::from_json(v.clone()).unwrap()))
        .collect()
}

/// True when every node is physical or an alternatives owner whose members
/// are all present.
pub fn closed(engine: &Engine, plan: &DataPlan) -> Result<(), String> {
    for (id, node) in &plan.nodes {
        let d = engine.operators().descriptor(&node.operator_id).unwrap();
        if d.kind == OperatorKind::Physical {
            continue;
        }
        match plan.alternatives.get(id) {
            Some(ms) if !ms.is_empty() && ms.iter().all(|m| plan.nodes.contains_key(m)) => {}
            _ => return Err(format!("`{id}` ({}) is a non-physical leaf", node.operator_id)),
        }
    }
    Ok(())
}

pub fn looping_registry() -> dil_core::registry::OperatorRegistry {
    let reg = dil_core::operators::catalog::bootstrap();
    let d = OperatorDescriptor::new(
        "again",
        OperatorKind::Abstract,
        "refines to itself",
        PortRange::exactly(0),
    )
    .attr("question", AttributeSpec::required(DeclaredType::String, "q"))
    .rule(RefinementRule::single(
        "again",
        "again",
        &[("question", Binding::Parent("question".into()))],
        0,
    ));
    reg.register_operator(d, None).unwrap();
    reg
}

/// Every reachable group's oracle choice is in the optimized plan and its
/// other members are gone.
pub fn check_selection(
    refined: &DataPlan,
    optimized: &DataPlan,
    choices: &BTreeMap<String, String>,
) -> Result<(), String> {
    if choices.is_empty() {
        return Err("no groups selected".into());
    }
    for (group, chosen) in choices {
        // a chosen member that owns a group is replaced by that group's choice
        let mut resolved = chosen;
        while let Some(next) = choices.get(resolved) {
            resolved = next;
        }
        if !optimized.nodes.contains_key(resolved) {
            return Err(format!("{group}: expected {resolved} selected"));
        }
        for m in &refined.alternatives[group] {
            if m != chosen && optimized.nodes.contains_key(m) {
                return Err(format!("{group}: {m} should not be selected"));
            }
        }
    }
    Ok(())
}

pub fn sorted_row_digests(engine: &Engine, plan: DataPlan) -> Vec<String> {
    let opts = ExecOptions {
        node_cache: false,
        ..ExecOptions::default()
    };
    let run = engine.execute_plan(None, plan, None, Some(opts)).unwrap();
    let view = engine.plan_view(&run.plan_id).unwrap();
    assert_eq!(view.record.status.as_str(), "done", "{:?}", view.record.error);
    let t = &view.record.final_batch.unwrap().tables[0];
    let mut d: Vec<String> = t
        .rows
        .iter()
        .map(|r| dil_core::digest(&dil_core::DataBatch::single(dil_core::Table::new(vec![r.clone()]))).unwrap())
        .collect();
    d.sort();
    d
}
