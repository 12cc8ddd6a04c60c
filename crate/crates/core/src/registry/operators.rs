//! Operator registry: descriptors for abstract, compound and physical
//! operators, their attribute contracts and refinement rules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::OperatorImpl;
use crate::value::{DeclaredType, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Abstract,
    Compound,
    Physical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Value must equal one of the listed values.
    Enum(Vec<Value>),
    /// Numeric value within the inclusive bounds.
    Range {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
}

impl Constraint {
    pub fn admits(&self, v: &Value) -> bool {
        match self {
            Constraint::Enum(options) => options.iter().any(|o| o.loose_eq(v)),
            Constraint::Range { min, max } => match v.as_f64() {
                Some(x) => min.is_none_or(|m| x >= m) && max.is_none_or(|m| x <= m),
                None => false,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    #[serde(rename = "type")]
    pub ty: DeclaredType,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl AttributeSpec {
    pub fn required(ty: DeclaredType, description: &str) -> Self {
        AttributeSpec {
            ty,
            description: description.to_string(),
            required: true,
            constraints: None,
            default: None,
        }
    }

    pub fn optional(ty: DeclaredType, description: &str) -> Self {
        AttributeSpec {
            required: false,
            ..Self::required(ty, description)
        }
    }

    pub fn with_default(mut self, v: impl Into<Value>) -> Self {
        self.default = Some(v.into());
        self
    }

    pub fn one_of(mut self, options: &[&str]) -> Self {
        self.constraints = Some(Constraint::Enum(options.iter().map(|s| Value::from(*s)).collect()));
        self
    }

    pub fn range(mut self, min: Option<f64>, max: Option<f64>) -> Self {
        self.constraints = Some(Constraint::Range { min, max });
        self
    }

    fn check(&self, name: &str, v: &Value) -> Option<String> {
        if !self.ty.accepts(v) {
            return Some(format!("attribute `{name}` expects {}, got {}", self.ty, v.type_name()));
        }
        if let Some(c) = &self.constraints {
            if !v.is_null() && !c.admits(v) {
                return Some(format!("attribute `{name}` value {v} violates constraint {c:?}"));
            }
        }
        None
    }
}

/// Accepted number of input tables, inclusive; `max: None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortRange {
    pub min: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<usize>,
}

impl PortRange {
    pub const fn exactly(n: usize) -> Self {
        PortRange { min: n, max: Some(n) }
    }

    pub const fn between(min: usize, max: usize) -> Self {
        PortRange { min, max: Some(max) }
    }

    pub const fn at_least(min: usize) -> Self {
        PortRange { min, max: None }
    }

    pub fn contains(&self, n: usize) -> bool {
        n >= self.min && self.max.is_none_or(|m| n <= m)
    }
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(m) if m == self.min => write!(f, "{m}"),
            Some(m) => write!(f, "{}..={m}", self.min),
            None => write!(f, "{}..", self.min),
        }
    }
}

/// How a template node obtains an attribute value when the parent is refined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Const(Value),
    /// Copy the parent's attribute of this name (skipped if absent).
    Parent(String),
    /// Like `Parent`, but the whole rule is inapplicable when it is absent.
    Require(String),
    /// Pick the best registered source of this protocol for the parent's
    /// question, restricted to the parent's `source_ids` when present.
    SelectSource(crate::registry::Protocol),
    /// Ids of every source a sub-question may be routed to, restricted to the
    /// parent's `source_ids` when present. The rule is skipped when fewer
    /// than two candidates remain.
    CandidateSources,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    Node(String),
    /// The table the parent node receives on this port.
    ParentInput(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub id: String,
    pub operator_id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Binding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEdge {
    pub from: EdgeSource,
    pub to: String,
    #[serde(default)]
    pub port: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubplanTemplate {
    pub nodes: Vec<TemplateNode>,
    #[serde(default)]
    pub edges: Vec<TemplateEdge>,
    /// Template node whose output replaces the parent's output.
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefinementTemplate {
    Subplan(SubplanTemplate),
    /// Runs the node's own operator at plan time to obtain sub-questions,
    /// then builds one branch per returned row, chained by the declared
    /// integration operators.
    Breakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRule {
    pub rule_id: String,
    pub produces: RefinementTemplate,
}

impl RefinementRule {
    /// A one-node subplan whose attributes are bound as given and whose
    /// input ports mirror the parent's.
    pub fn single(rule_id: &str, operator_id: &str, bindings: &[(&str, Binding)], ports: usize) -> Self {
        let node = TemplateNode {
            id: "out".into(),
            operator_id: operator_id.into(),
            attributes: bindings.iter().map(|(k, b)| (k.to_string(), b.clone())).collect(),
        };
        let edges = (0..ports)
            .map(|p| TemplateEdge {
                from: EdgeSource::ParentInput(p),
                to: "out".into(),
                port: p,
            })
            .collect();
        RefinementRule {
            rule_id: rule_id.into(),
            produces: RefinementTemplate::Subplan(SubplanTemplate {
                nodes: vec![node],
                edges,
                output: "out".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub operator_id: String,
    pub kind: OperatorKind,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub attribute_schema: IndexMap<String, AttributeSpec>,
    #[serde(default)]
    pub property_schema: IndexMap<String, AttributeSpec>,
    pub input_ports: PortRange,
    #[serde(default)]
    pub refinements: Vec<RefinementRule>,
    /// Deterministic given its inputs, attributes and cache-relevant
    /// properties; pure nodes are eligible for the node cache.
    #[serde(default = "default_true")]
    pub pure: bool,
}

fn default_true() -> bool {
    true
}

pub type Attributes = BTreeMap<String, Value>;
pub type Properties = BTreeMap<String, Value>;

impl OperatorDescriptor {
    pub fn new(operator_id: &str, kind: OperatorKind, description: &str, input_ports: PortRange) -> Self {
        OperatorDescriptor {
            operator_id: operator_id.into(),
            kind,
            description: description.into(),
            attribute_schema: IndexMap::new(),
            property_schema: IndexMap::new(),
            input_ports,
            refinements: Vec::new(),
            pure: true,
        }
    }

    pub fn attr(mut self, name: &str, spec: AttributeSpec) -> Self {
        self.attribute_schema.insert(name.into(), spec);
        self
    }

    pub fn prop(mut self, name: &str, spec: AttributeSpec) -> Self {
        self.property_schema.insert(name.into(), spec);
        self
    }

    pub fn rule(mut self, rule: RefinementRule) -> Self {
        self.refinements.push(rule);
        self
    }

    pub fn impure(mut self) -> Self {
        self.pure = false;
        self
    }

    fn check(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::invalid(format!("operator `{}`", self.operator_id), m));
        if self.operator_id.is_empty() {
            return invalid("empty operator id".into());
        }
        match self.kind {
            OperatorKind::Physical if !self.refinements.is_empty() => {
                return invalid("physical operators cannot declare refinements".into())
            }
            OperatorKind::Abstract | OperatorKind::Compound if self.refinements.is_empty() => {
                return invalid("abstract and compound operators need at least one refinement".into())
            }
            _ => {}
        }
        for (name, spec) in self.attribute_schema.iter().chain(&self.property_schema) {
            if let Some(d) = &spec.default {
                if let Some(msg) = spec.check(name, d) {
                    return invalid(format!("default: {msg}"));
                }
            }
        }
        for rule in &self.refinements {
            if let RefinementTemplate::Subplan(t) = &rule.produces {
                check_template(t).or_else(|m| invalid(format!("rule `{}`: {m}", rule.rule_id)))?;
            }
        }
        Ok(())
    }

    /// Validates attributes against the schema and fills in defaults.
    /// Returns every violation found.
    pub fn validate_attributes(&self, attrs: &Attributes) -> std::result::Result<Attributes, Vec<String>> {
        let mut problems = Vec::new();
        let mut out = Attributes::new();
        for (name, v) in attrs {
            match self.attribute_schema.get(name) {
                None => problems.push(format!("unknown attribute `{name}`")),
                Some(spec) => match spec.check(name, v) {
                    Some(p) => problems.push(p),
                    None => {
                        out.insert(name.clone(), v.clone());
                    }
                },
            }
        }
        for (name, spec) in &self.attribute_schema {
            let present = attrs.get(name).is_some_and(|v| !v.is_null());
            if present {
                continue;
            }
            if let Some(d) = &spec.default {
                out.insert(name.clone(), d.clone());
            } else if spec.required {
                problems.push(format!("missing required attribute `{name}`"));
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(problems)
        }
    }
}

fn check_template(t: &SubplanTemplate) -> std::result::Result<(), String> {
    let ids: Vec<&str> = t.nodes.iter().map(|n| n.id.as_str()).collect();
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(format!("duplicate template node `{id}`"));
        }
    }
    if !ids.contains(&t.output.as_str()) {
        return Err(format!("output `{}` is not a template node", t.output));
    }
    for e in &t.edges {
        if !ids.contains(&e.to.as_str()) {
            return Err(format!("edge into unknown node `{}`", e.to));
        }
        if let EdgeSource::Node(f) = &e.from {
            if !ids.contains(&f.as_str()) {
                return Err(format!("edge from unknown node `{f}`"));
            }
        }
    }
    // Kahn's algorithm over node-to-node edges
    let mut indeg: HashMap<&str, usize> = ids.iter().map(|i| (*i, 0)).collect();
    for e in &t.edges {
        if matches!(e.from, EdgeSource::Node(_)) {
            *indeg.get_mut(e.to.as_str()).unwrap() += 1;
        }
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for e in &t.edges {
            if let EdgeSource::Node(f) = &e.from {
                if f == n {
                    let d = indeg.get_mut(e.to.as_str()).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.push(e.to.as_str());
                    }
                }
            }
        }
    }
    if seen != ids.len() {
        return Err("template edges form a cycle".into());
    }
    Ok(())
}

#[derive(Default)]
struct OpState {
    descriptors: IndexMap<String, OperatorDescriptor>,
    impls: HashMap<String, Arc<dyn OperatorImpl>>,
}

/// Registry of operator descriptors and their bound implementations.
#[derive(Default)]
pub struct OperatorRegistry {
    state: RwLock<OpState>,
}

impl fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.state.read().unwrap();
        f.debug_struct("OperatorRegistry")
            .field("operators", &st.descriptors.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a descriptor. Physical operators must come with an
    /// implementation; compound operators may bind one for plan-time use.
    pub fn register_operator(
        &self,
        descriptor: OperatorDescriptor,
        implementation: Option<Arc<dyn OperatorImpl>>,
    ) -> Result<String> {
        descriptor.check()?;
        if descriptor.kind == OperatorKind::Physical && implementation.is_none() {
            return Err(Error::invalid(
                format!("operator `{}`", descriptor.operator_id),
                "physical operator has no bound implementation",
            ));
        }
        let mut st = self.state.write().unwrap();
        if st.descriptors.contains_key(&descriptor.operator_id) {
            return Err(Error::Conflict {
                kind: "operator",
                id: descriptor.operator_id,
            });
        }
        let id = descriptor.operator_id.clone();
        if let Some(imp) = implementation {
            st.impls.insert(id.clone(), imp);
        }
        st.descriptors.insert(id.clone(), descriptor);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<OperatorDescriptor> {
        self.state.read().unwrap().descriptors.get(id).cloned()
    }

    pub fn descriptor(&self, id: &str) -> Result<OperatorDescriptor> {
        self.get(id).ok_or_else(|| Error::not_found("operator", id))
    }

    pub fn implementation(&self, id: &str) -> Option<Arc<dyn OperatorImpl>> {
        self.state.read().unwrap().impls.get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.state.read().unwrap().descriptors.contains_key(id)
    }

    /// Descriptors in registration order.
    pub fn list(&self) -> Vec<OperatorDescriptor> {
        self.state.read().unwrap().descriptors.values().cloned().collect()
    }

    pub fn list_refinements(&self, id: &str) -> Result<Vec<RefinementRule>> {
        Ok(self.descriptor(id)?.refinements)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.list())?)
    }

    /// Loads descriptors, binding implementations through `bind`.
    pub fn from_json(text: &str, bind: impl Fn(&str) -> Option<Arc<dyn OperatorImpl>>) -> Result<Self> {
        let list: Vec<OperatorDescriptor> = serde_json::from_str(text)?;
        let reg = OperatorRegistry::new();
        for d in list {
            let imp = bind(&d.operator_id);
            reg.register_operator(d, imp)?;
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_atomic(path, self.to_json()?.as_bytes())
    }
}
