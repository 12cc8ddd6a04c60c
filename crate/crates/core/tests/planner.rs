mod common;
mod oracle;

use std::collections::BTreeMap;

use common::planning::{closed, looping_registry, sample_attributes, sorted_row_digests};
use dil_core::planner::{
    estimate_cost, instantiate, refine, CostContext, CostEstimate, CostModel, DataPlan, Edge, Objective, PlanNode,
    PlanViolationKind, DEFAULT_MAX_DEPTH,
};
use dil_core::registry::OperatorKind;
use dil_core::{Error, Value};
use oracle::cost::CostOracle;

#[test]
fn refinement_closes_every_bootstrap_operator() {
    let engine = common::engine();
    let ops = engine.list_operators();
    assert!(ops.len() >= 15);
    for d in ops {
        let plan = engine
            .instantiate(&d.operator_id, sample_attributes(&d.operator_id))
            .unwrap();
        let (refined, _) = engine
            .refine_plan(plan)
            .unwrap_or_else(|e| panic!("refining `{}`: {e}", d.operator_id));
        closed(&engine, &refined).unwrap_or_else(|e| panic!("refining `{}`: {e}", d.operator_id));
        let optimized = engine
            .optimize_plan(&refined, Some(Objective::default()), true, None)
            .unwrap();
        assert!(
            optimized
                .nodes
                .values()
                .all(|n| engine.operators().descriptor(&n.operator_id).unwrap().kind == OperatorKind::Physical),
            "optimized `{}` still has non-physical nodes",
            d.operator_id
        );
    }
}

#[test]
fn self_referential_rule_exceeds_depth() {
    let engine = common::engine();
    let reg = looping_registry();
    let attrs = BTreeMap::from([("question".to_string(), Value::from("q"))]);
    let plan = instantiate(&reg, "again", attrs).unwrap();
    match refine(&reg, engine.sources(), plan, DEFAULT_MAX_DEPTH) {
        Err(Error::DepthExceeded { depth, operator, .. }) => {
            assert_eq!(depth, DEFAULT_MAX_DEPTH);
            assert_eq!(operator, "again");
        }
        other => panic!("expected depth exceeded, got {other:?}"),
    }
}

#[test]
fn bay_area_question_decomposes_into_three_sources() {
    let engine = common::engine();
    let planned = engine.plan_question(common::BAY_AREA_QUESTION, None, None).unwrap();
    let root_group = &planned.refined.alternatives["n0"];
    let ops: Vec<&str> = root_group
        .iter()
        .map(|m| planned.refined.nodes[m].operator_id.as_str())
        .collect();
    assert_eq!(ops, ["nl2sql", "nl2llm", "query_breakdown"]);

    let chosen: Vec<&str> = planned
        .optimized
        .nodes
        .values()
        .map(|n| n.operator_id.as_str())
        .collect();
    for op in ["nl2sql", "nl2llm", "nl2u", "in_filter", "join"] {
        assert!(chosen.contains(&op), "optimized plan lacks {op}: {chosen:?}");
    }
    let by_op = |op: &str| {
        planned
            .optimized
            .nodes
            .values()
            .find(|n| n.operator_id == op)
            .unwrap()
            .attributes["question"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(by_op("nl2sql"), "what are data scientist jobs?");
    assert_eq!(by_op("nl2llm"), "which locations are considered Bay Area?");
    assert_eq!(by_op("nl2u"), "what jobs are suitable for me?");
}

fn cost_oracle() -> CostOracle {
    CostOracle::load(
        &std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/cost_model.json"),
        &common::fixtures(),
    )
}

#[test]
fn selection_matches_independent_cost_rules() {
    let engine = common::engine();
    let mut oracle = cost_oracle();
    assert_eq!(oracle.quality_floor, engine.config().default_objective.quality_floor);

    let planned = engine.plan_question(common::BAY_AREA_QUESTION, None, None).unwrap();
    let refined_json = serde_json::to_value(&planned.refined).unwrap();
    let choices = oracle.select(&refined_json).unwrap();
    assert_eq!(choices["n0"], "n0.query_breakdown");
    common::planning::check_selection(&planned.refined, &planned.optimized, &choices).unwrap();

    oracle.quality_floor = 0.0;
    let floor0 = Objective {
        quality_floor: 0.0,
        ..Objective::default()
    };
    let optimized = engine
        .optimize_plan(&planned.refined, Some(floor0), true, None)
        .unwrap();
    let choices = oracle.select(&refined_json).unwrap();
    assert_eq!(choices["n0"], "n0.nl2sql");
    common::planning::check_selection(&planned.refined, &optimized, &choices).unwrap();

    let alt = common::fixture_plan("alternatives");
    let optimized = engine.optimize_plan(&alt, None, true, None).unwrap();
    oracle.quality_floor = engine.config().default_objective.quality_floor;
    let choices = oracle.select(&serde_json::to_value(&alt).unwrap()).unwrap();
    assert_eq!(choices["q"], "q.nl2sql");
    common::planning::check_selection(&alt, &optimized, &choices).unwrap();
}

#[test]
fn unreachable_quality_floor_is_infeasible() {
    let engine = common::engine();
    let mut oracle = cost_oracle();
    oracle.quality_floor = 0.99;
    let planned = engine.plan_question(common::BAY_AREA_QUESTION, None, None).unwrap();
    assert!(oracle
        .select(&serde_json::to_value(&planned.refined).unwrap())
        .is_none());
    let strict = Objective {
        quality_floor: 0.99,
        ..Objective::default()
    };
    let err = engine
        .optimize_plan(&planned.refined, Some(strict), true, None)
        .unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }), "{err}");
    assert_eq!(err.code(), dil_core::ErrorCode::Infeasible);
}

#[test]
fn optimization_preserves_results_on_fixture_plans() {
    let engine = common::engine();
    assert!(common::FIXTURE_PLANS.len() >= 5);
    for name in common::FIXTURE_PLANS {
        let plan = common::fixture_plan(name);
        let plain = engine.optimize_plan(&plan, None, false, None).unwrap();
        let rewritten = engine.optimize_plan(&plan, None, true, None).unwrap();
        let a = sorted_row_digests(&engine, plain);
        let b = sorted_row_digests(&engine, rewritten);
        assert!(!a.is_empty(), "{name} returned no rows");
        assert_eq!(a, b, "{name}: rewrites changed the result");
    }
}

#[test]
fn rewrites_fire_on_their_fixtures() {
    let engine = common::engine();
    let opt = |name: &str| {
        engine
            .optimize_plan(&common::fixture_plan(name), None, true, None)
            .unwrap()
    };

    let join = opt("pushdown_join");
    let into = |plan: &DataPlan, id: &str| plan.consumers(id).iter().map(|e| e.to.clone()).collect::<Vec<_>>();
    assert_eq!(into(&join, "jobs"), ["well_paid"]);
    assert_eq!(into(&join, "ratings"), ["well_rated"]);

    let union = opt("pushdown_union");
    assert!(union.nodes.contains_key("high.p0") && union.nodes.contains_key("high.p1"));
    assert!(!union.nodes.contains_key("high"));

    let dedup = opt("dedup");
    assert!(dedup.nodes.contains_key("a") && !dedup.nodes.contains_key("b"));
    assert!(dedup.nodes.contains_key("pa") && !dedup.nodes.contains_key("pb"));
    let pairs_inputs: Vec<&str> = dedup.inputs("pairs").iter().map(|e| e.from.as_str()).collect();
    assert_eq!(pairs_inputs, ["pa", "pa"]);
}

#[test]
fn validation_reports_cycles_and_dangling_ports() {
    let engine = common::engine();
    let mut plan = DataPlan::single("a", PlanNode::new("filter", sample_attributes("filter")));
    plan.nodes
        .insert("b".into(), PlanNode::new("filter", sample_attributes("filter")));
    plan.edges = vec![Edge::new("a", "b", 0), Edge::new("b", "a", 0)];
    plan.root = "b".into();
    let report = engine.validate_plan(&plan);
    assert_eq!(report.count(PlanViolationKind::Cycle), 1);

    let lonely = DataPlan::single("j", PlanNode::new("join", sample_attributes("join")));
    let report = engine.validate_plan(&lonely);
    assert_eq!(report.count(PlanViolationKind::DanglingPort), 2);

    assert!(engine.validate_plan(&common::fixture_plan("pushdown_join")).is_empty());
}

#[test]
fn empty_plan_costs_nothing_and_single_llm_node_costs_one_call() {
    let model = CostModel::default();
    let empty = DataPlan::default();
    assert_eq!(
        estimate_cost(&empty, CostContext::new(&model), Objective::default()).unwrap(),
        CostEstimate::zero()
    );
    let one = DataPlan::single("n", PlanNode::new("nl2llm", sample_attributes("nl2llm")));
    let c = estimate_cost(&one, CostContext::new(&model), Objective::default()).unwrap();
    assert_eq!(
        (c.latency, c.money, c.quality),
        (model.llm_latency, model.llm_money, model.llm_quality)
    );
}
