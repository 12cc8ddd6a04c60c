mod common;

use dil_core::registry::data::Level;
use dil_core::{Engine, Value};

const JOBS: &str = "jobs_db";

fn csv_shape() -> (Vec<String>, usize) {
    let mut r = csv::Reader::from_path(common::fixtures().join("jobs/jobs.csv")).unwrap();
    let headers = r.headers().unwrap().iter().map(str::to_string).collect();
    (headers, r.records().count())
}

#[test]
fn jobs_sync_produces_one_collection_and_its_attributes() {
    let engine = common::engine();
    let entries = engine.sync_source(JOBS).unwrap();
    let (headers, rows) = csv_shape();
    assert_eq!(rows, 12);
    let collections: Vec<_> = entries.iter().filter(|e| e.level == Level::Collection).collect();
    let attributes: Vec<_> = entries.iter().filter(|e| e.level == Level::Attribute).collect();
    assert_eq!(collections.len(), 1);
    assert_eq!(attributes.len(), headers.len());
    assert_eq!(attributes.len(), 5);
    assert_eq!(collections[0].name(), "jobs");
    assert_eq!(collections[0].statistics.row_count, Some(rows as u64));
    let mut names: Vec<&str> = attributes.iter().map(|e| e.name()).collect();
    names.sort();
    let mut want: Vec<&str> = headers.iter().map(String::as_str).collect();
    want.sort();
    assert_eq!(names, want);
    for a in &attributes {
        assert_eq!(&a.path[..3], &collections[0].path[..]);
    }
}

#[test]
fn exact_name_ranks_first() {
    let engine = common::engine();
    let hits = engine.search("jobs", None, 10);
    assert!(!hits.is_empty());
    assert_eq!(hits[0].entry.name(), "jobs");
    assert_eq!(hits[0].entry.level, Level::Collection);
    let attrs = engine.search("salary", Some(Level::Attribute), 3);
    assert_eq!(attrs[0].entry.name(), "salary");
    assert!(attrs.iter().all(|h| h.entry.level == Level::Attribute));
}

/// Registry JSON without the per-source sync log, which records when and how
/// often each source was synced.
fn metadata_bytes(engine: &Engine) -> String {
    let mut j: serde_json::Value = serde_json::from_str(&engine.sources().registry().to_json().unwrap()).unwrap();
    j.as_object_mut().unwrap().remove("logs");
    serde_json::to_string_pretty(&j).unwrap()
}

#[test]
fn double_sync_is_byte_identical() {
    let engine = common::engine();
    let first = dil_core::canonical::to_canonical_string(&engine.sync_source(JOBS).unwrap()).unwrap();
    let before = metadata_bytes(&engine);
    let second = dil_core::canonical::to_canonical_string(&engine.sync_source(JOBS).unwrap()).unwrap();
    assert_eq!(first, second);
    assert_eq!(metadata_bytes(&engine), before);
    assert_eq!(engine.sources().registry().sync_log(JOBS).unwrap().sync_count, 3);
}

#[test]
fn samples_and_statistics_come_from_the_data() {
    let engine = common::engine();
    let entries = engine.sync_source(JOBS).unwrap();
    let salary = entries.iter().find(|e| e.name() == "salary").unwrap();
    let mut r = csv::Reader::from_path(common::fixtures().join("jobs/jobs.csv")).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == "salary").unwrap();
    let values: Vec<i64> = r.records().filter_map(|rec| rec.unwrap()[idx].parse().ok()).collect();
    assert_eq!(salary.statistics.min, Some(Value::Int(*values.iter().min().unwrap())));
    assert_eq!(salary.statistics.max, Some(Value::Int(*values.iter().max().unwrap())));
    assert!(!salary.samples.is_empty() && salary.samples.len() <= dil_core::registry::data::MAX_SAMPLES);
}

#[test]
fn web_extraction_matches_golden_listing() {
    let engine = common::engine();
    let golden: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(common::fixtures().join("web/apartments.golden.json")).unwrap())
            .unwrap();
    let plan = common::fixture_plan("web");
    let node = &plan.nodes["listings"];
    let schema: dil_core::Schema = serde_json::from_value(node.attributes["output_schema"].to_json()).unwrap();
    let key = node.attributes["key"].as_str().unwrap();
    let table = engine
        .sources()
        .web_extract("web", key, &schema, &Default::default())
        .unwrap();
    let got: Vec<serde_json::Value> = table.rows.iter().map(|r| serde_json::to_value(r).unwrap()).collect();
    assert_eq!(got, golden);
}
