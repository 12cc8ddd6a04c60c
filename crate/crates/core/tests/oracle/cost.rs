//! Alternative selection recomputed from the cost-model constants, the
//! fixture files and a plan's JSON form. Shares no code with the engine's
//! estimator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::Value as J;

pub struct CostOracle {
    model: BTreeMap<String, f64>,
    /// source id -> row count of its largest CSV table, per table name
    tables: BTreeMap<String, BTreeMap<String, f64>>,
    pub quality_floor: f64,
}

#[derive(Clone, Debug)]
pub struct Est {
    pub rows: f64,
    pub latency: f64,
    pub quality: f64,
    pub sources: BTreeSet<String>,
}

impl CostOracle {
    pub fn load(cost_model: &Path, fixtures: &Path) -> Self {
        let model: BTreeMap<String, f64> = serde_json::from_str(&std::fs::read_to_string(cost_model).unwrap()).unwrap();
        let config: J = serde_json::from_str(&std::fs::read_to_string(fixtures.join("config.json")).unwrap()).unwrap();
        let mut tables = BTreeMap::new();
        for s in config["sources"].as_array().unwrap() {
            if let Some(csv) = s["connection"]["csv"].as_object() {
                let counts = csv
                    .iter()
                    .map(|(name, file)| {
                        let text = std::fs::read_to_string(fixtures.join(file.as_str().unwrap())).unwrap();
                        let rows = text.lines().filter(|l| !l.trim().is_empty()).count() - 1;
                        (name.to_lowercase(), rows as f64)
                    })
                    .collect();
                tables.insert(s["source_id"].as_str().unwrap().to_string(), counts);
            }
        }
        let quality_floor = config["default_objective"]["quality_floor"].as_f64().unwrap_or(0.0);
        CostOracle {
            model,
            tables,
            quality_floor,
        }
    }

    fn m(&self, k: &str) -> f64 {
        self.model[k]
    }

    fn rows_of(&self, source: &str, table: Option<&str>) -> f64 {
        let Some(t) = self.tables.get(source) else {
            return self.m("default_rows");
        };
        match table {
            Some(name) => t.get(&name.to_lowercase()).copied().unwrap_or(self.m("default_rows")),
            None => t.values().copied().fold(f64::NAN, f64::max),
        }
    }

    fn statement_rows(&self, source: &str, statement: &str) -> f64 {
        let words: Vec<String> = statement
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .map(str::to_lowercase)
            .collect();
        self.tables
            .get(source)
            .and_then(|t| t.iter().find(|(name, _)| words.contains(name)).map(|(_, n)| *n))
            .unwrap_or(self.m("default_rows"))
    }

    /// (rows, latency, quality) of a physical node on its own.
    fn own(&self, node: &J, input_rows: &[f64]) -> (f64, f64, f64) {
        let a = &node["attributes"];
        let s = |k: &str| a[k].as_str().unwrap_or_default();
        let first = input_rows.first().copied().unwrap_or(0.0);
        let scan = |rows: f64| {
            (
                rows,
                self.m("scan_latency") + self.m("scan_latency_per_row") * rows,
                self.m("scan_quality"),
            )
        };
        let local = self.m("local_latency");
        match node["operator_id"].as_str().unwrap() {
            "sql_scan" => scan(self.statement_rows(s("source_id"), s("statement"))),
            "nl2sql" => scan(self.rows_of(s("source_id"), a["collection_hint"].as_str())),
            "nl2llm" | "query_breakdown" => (self.m("llm_rows"), self.m("llm_latency"), self.m("llm_quality")),
            "nl2u" => (self.m("user_rows"), self.m("user_latency"), self.m("user_quality")),
            "nl2vec" => (
                a["k"].as_f64().unwrap_or(5.0),
                self.m("vector_latency"),
                self.m("vector_quality"),
            ),
            "web_extract" => (self.m("web_rows"), self.m("web_latency"), self.m("web_quality")),
            "values" => (
                a["rows"].as_array().map_or(0, Vec::len) as f64,
                self.m("values_latency"),
                1.0,
            ),
            "filter" => (first * self.m("filter_selectivity"), local, 1.0),
            "in_filter" => (first * self.m("in_selectivity"), local, 1.0),
            "join" => (
                first * input_rows.get(1).copied().unwrap_or(0.0) * self.m("join_selectivity"),
                local,
                1.0,
            ),
            "union" => (input_rows.iter().sum(), local, 1.0),
            "sort_limit" => (first.min(a["limit"].as_f64().unwrap_or(f64::INFINITY)), local, 1.0),
            _ => (first, local, 1.0),
        }
    }

    /// Estimate of the subplan at `id`; group owners resolve to their best
    /// feasible member, recorded in `choices`.
    pub fn estimate(&self, plan: &J, id: &str, choices: &mut BTreeMap<String, String>) -> Option<Est> {
        let node = &plan["nodes"][id];
        if let Some(members) = plan["alternatives"].get(id).and_then(J::as_array) {
            let required: BTreeSet<String> = node["properties"]["required_sources"]
                .as_array()
                .map(|l| l.iter().map(|v| v.as_str().unwrap().to_string()).collect())
                .unwrap_or_default();
            let mut best: Option<(String, Est)> = None;
            for m in members {
                let m = m.as_str().unwrap();
                let Some(mut e) = self.estimate(plan, m, choices) else {
                    continue;
                };
                if !required.is_empty() {
                    let covered = required.iter().filter(|s| e.sources.contains(*s)).count() as f64;
                    e.quality *= covered / required.len() as f64;
                }
                if e.quality + 1e-12 < self.quality_floor {
                    continue;
                }
                let op = |n: &str| plan["nodes"][n]["operator_id"].as_str().unwrap().to_string();
                let better = match &best {
                    None => true,
                    Some((bid, b)) => (e.latency, op(m), m.to_string()) < (b.latency, op(bid), bid.clone()),
                };
                if better {
                    best = Some((m.to_string(), e));
                }
            }
            let (chosen, e) = best?;
            choices.insert(id.to_string(), chosen);
            return Some(e);
        }
        let mut ins: Vec<(u64, String)> = plan["edges"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|e| e["to"] == id)
            .map(|e| (e["port"].as_u64().unwrap_or(0), e["from"].as_str().unwrap().to_string()))
            .collect();
        ins.sort();
        let mut inputs = Vec::new();
        for (_, from) in &ins {
            inputs.push(self.estimate(plan, from, choices)?);
        }
        let rows: Vec<f64> = inputs.iter().map(|e| e.rows).collect();
        let (r, lat, q) = self.own(node, &rows);
        let mut sources: BTreeSet<String> = node["attributes"]["source_id"]
            .as_str()
            .map(str::to_string)
            .into_iter()
            .collect();
        for e in &inputs {
            sources.extend(e.sources.iter().cloned());
        }
        Some(Est {
            rows: r,
            latency: lat + inputs.iter().map(|e| e.latency).fold(0.0, f64::max),
            quality: inputs.iter().map(|e| e.quality).fold(q, f64::min),
            sources,
        })
    }

    /// Chosen member per group reachable from the root once selection is
    /// applied, or `None` when some reachable group has no feasible member.
    pub fn select(&self, plan: &J) -> Option<BTreeMap<String, String>> {
        let mut choices = BTreeMap::new();
        self.estimate(plan, plan["root"].as_str().unwrap(), &mut choices)?;
        let mut reachable = BTreeMap::new();
        let mut stack = vec![plan["root"].as_str().unwrap().to_string()];
        while let Some(n) = stack.pop() {
            if let Some(c) = choices.get(&n) {
                reachable.insert(n.clone(), c.clone());
                stack.push(c.clone());
            }
            for e in plan["edges"].as_array().unwrap() {
                if e["to"] == n.as_str() {
                    stack.push(e["from"].as_str().unwrap().to_string());
                }
            }
        }
        Some(reachable)
    }
}
