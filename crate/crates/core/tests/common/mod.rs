#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dil_core::clock::Clock;
use dil_core::config::Config;
use dil_core::planner::DataPlan;
use dil_core::session::{MessageKind, Session, StreamMessage};
use dil_core::Engine;

pub mod planning;

pub const BAY_AREA_QUESTION: &str = "What are data scientist jobs suitable for me in the bay area?";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_config() -> Config {
    Config::load(&fixtures().join("config.json")).expect("fixture config loads")
}

pub fn engine() -> Engine {
    Engine::open(fixture_config()).expect("engine opens on fixtures")
}

pub fn engine_with_clock(clock: Arc<dyn Clock>) -> Engine {
    Engine::open_with_clock(fixture_config(), clock).expect("engine opens on fixtures")
}

pub fn fixture_plan(name: &str) -> DataPlan {
    let text = std::fs::read_to_string(fixtures().join("plans").join(format!("{name}.json"))).unwrap();
    DataPlan::from_json(&text).unwrap()
}

pub const FIXTURE_PLANS: &[&str] = &[
    "alternatives",
    "dedup",
    "pushdown_join",
    "pushdown_union",
    "recipes",
    "two_branch",
    "web",
];

pub fn messages(session: &Session, kind: MessageKind) -> Vec<StreamMessage> {
    session
        .main()
        .read_after(0)
        .into_iter()
        .filter(|m| m.kind == kind)
        .collect()
}
