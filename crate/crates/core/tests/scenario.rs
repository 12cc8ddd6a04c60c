mod common;
mod oracle;

use dil_core::executor::PlanStatus;
use dil_core::session::MessageKind;
use dil_core::Value;
use serde_json::json;

#[test]
fn bay_area_query_suspends_then_completes() {
    let engine = common::engine();
    let session = engine.create_session(None);
    let run = engine
        .query(&session.session_id, common::BAY_AREA_QUESTION, None)
        .unwrap();
    assert_eq!(run.status, PlanStatus::Suspended);
    let prompts = common::messages(&session, MessageKind::Prompt);
    assert_eq!(prompts.len(), 1);
    let pid = prompts[0].payload["prompt_id"].as_str().unwrap().to_string();
    let done = engine
        .answer(&session.session_id, &pid, &json!({"min_salary": 150000}))
        .unwrap();
    assert_eq!(done.status, PlanStatus::Done);
    let view = engine.plan_view(&run.plan_id).unwrap();
    let rows = &view.record.final_batch.unwrap().tables[0].rows;
    let mut ids: Vec<i64> = rows
        .iter()
        .map(|r| r.get("id").and_then(Value::as_i64).unwrap())
        .collect();
    ids.sort();
    assert_eq!(ids, [1, 2, 9]);
}

fn answers() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(common::fixtures().join("answers.json")).unwrap()).unwrap()
}

#[test]
fn bay_area_rows_match_brute_force() {
    let engine = common::engine();
    let session = engine.create_session(None);
    let mut run = engine
        .query(&session.session_id, common::BAY_AREA_QUESTION, None)
        .unwrap();
    let scripted = answers();
    while run.status == PlanStatus::Suspended {
        let prompt = common::messages(&session, MessageKind::Prompt).pop().unwrap();
        let q = prompt.payload["question"].as_str().unwrap();
        run = engine
            .answer(
                &session.session_id,
                prompt.payload["prompt_id"].as_str().unwrap(),
                &scripted[q],
            )
            .unwrap();
    }
    assert_eq!(run.status, PlanStatus::Done);
    let batch = engine.plan_view(&run.plan_id).unwrap().record.final_batch.unwrap();
    let got = oracle::from_table(&batch.tables[0]);
    let want = oracle::bay_area_rows(&common::fixtures(), common::BAY_AREA_QUESTION);
    assert_eq!(want.len(), 3);
    assert_eq!(oracle::sorted_digests(&got), oracle::sorted_digests(&want));
}
