//! Universal value / row / table / batch data model.
//!
//! Every operator consumes and produces a [`DataBatch`]: an ordered list of
//! tables, each an ordered list of attribute-to-value rows.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;
use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A finite 64-bit float. NaN and infinities cannot be represented.
#[derive(Clone, Copy, Debug)]
pub struct Finite(f64);

impl Finite {
    pub fn new(v: f64) -> Option<Self> {
        v.is_finite().then_some(Finite(v))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl PartialEq for Finite {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for Finite {}

impl PartialOrd for Finite {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Finite {
    fn cmp(&self, other: &Self) -> Ordering {
        // finite values always compare
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal)
    }
}

impl Hash for Finite {
    fn hash<H: Hasher>(&self, state: &mut H) {
        // -0.0 == 0.0
        let v = if self.0 == 0.0 { 0.0f64 } else { self.0 };
        v.to_bits().hash(state);
    }
}

/// A dynamically typed attribute value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum Value {
    #[default]
    Null,
    Bool(bool),
    Int(i64),
    Float(Finite),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    /// Builds a float value, rejecting NaN and infinities.
    pub fn float(v: f64) -> Option<Value> {
        Finite::new(v).map(Value::Float)
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Float(f) if f.get().fract() == 0.0 && f.get().abs() < 9.2e18 => Some(f.get() as i64),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(f.get()),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Converts from untyped JSON; fails on non-finite numbers, empty map
    /// keys or out-of-range integers.
    pub fn from_json(j: serde_json::Value) -> crate::error::Result<Value> {
        Ok(serde_json::from_value(j)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    pub fn is_number(&self) -> bool {
        matches!(self, Value::Int(_) | Value::Float(_))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Bool(_) => 1,
            Value::Int(_) | Value::Float(_) => 2,
            Value::Str(_) => 3,
            Value::List(_) => 4,
            Value::Map(_) => 5,
        }
    }

    /// Key used by joins and membership tests: integral floats collapse to
    /// integers so that `1 == 1.0`; null never matches anything.
    pub fn join_key(&self) -> Option<Value> {
        match self {
            Value::Null => None,
            Value::Float(f) => {
                let v = f.get();
                if v.fract() == 0.0 && (-9_223_372_036_854_775_808.0..9_223_372_036_854_775_808.0).contains(&v) {
                    Some(Value::Int(v as i64))
                } else {
                    Some(self.clone())
                }
            }
            other => Some(other.clone()),
        }
    }

    /// Equality with numeric normalization (`1 == 1.0`), recursing into
    /// lists and maps.
    pub fn loose_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => {
                cmp_numbers(self, other) == Ordering::Equal
            }
            (Value::List(a), Value::List(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.loose_eq(y)),
            (Value::Map(a), Value::Map(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.loose_eq(vb))
            }
            _ => self == other,
        }
    }
}

fn cmp_int_float(i: i64, f: f64) -> Ordering {
    let as_f = i as f64;
    match as_f.partial_cmp(&f).unwrap_or(Ordering::Equal) {
        Ordering::Equal => {
            // `f` is integral here and within i64-ish range; compare exactly
            (i as i128).cmp(&(f as i128))
        }
        other => other,
    }
}

fn cmp_numbers(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Float(x), Value::Float(y)) => x.cmp(y),
        (Value::Int(x), Value::Float(y)) => cmp_int_float(*x, y.get()),
        (Value::Float(x), Value::Int(y)) => cmp_int_float(*y, x.get()).reverse(),
        _ => unreachable!("cmp_numbers on non-numbers"),
    }
}

/// Numeric comparison for two values that are both numbers.
pub fn compare_numeric(a: &Value, b: &Value) -> Option<Ordering> {
    (a.is_number() && b.is_number()).then(|| cmp_numbers(a, b))
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order: null < boolean < number < string < list < map. Integers and
/// floats compare numerically; on numeric ties integers sort first so the
/// order stays consistent with structural equality.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        let by_rank = self.rank().cmp(&other.rank());
        if by_rank != Ordering::Equal {
            return by_rank;
        }
        match (self, other) {
            (Value::Null, Value::Null) => Ordering::Equal,
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            (Value::List(a), Value::List(b)) => a.cmp(b),
            (Value::Map(a), Value::Map(b)) => a.cmp(b),
            _ => cmp_numbers(self, other).then_with(|| {
                let is_float = |v: &Value| matches!(v, Value::Float(_));
                is_float(self).cmp(&is_float(other))
            }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Str(s) => f.write_str(s),
            other => match crate::canonical::to_canonical_string(other) {
                Ok(s) => f.write_str(&s),
                Err(_) => f.write_str("<invalid>"),
            },
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl<T: Into<Value>> From<Vec<T>> for Value {
    fn from(v: Vec<T>) -> Self {
        Value::List(v.into_iter().map(Into::into).collect())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Null => s.serialize_unit(),
            Value::Bool(b) => s.serialize_bool(*b),
            Value::Int(i) => s.serialize_i64(*i),
            Value::Float(f) => {
                if !f.get().is_finite() {
                    return Err(serde::ser::Error::custom("non-finite float"));
                }
                s.serialize_f64(f.get())
            }
            Value::Str(v) => s.serialize_str(v),
            Value::List(l) => l.serialize(s),
            Value::Map(m) => m.serialize(s),
        }
    }
}

struct ValueVisitor;

impl<'de> Visitor<'de> for ValueVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
        Value::deserialize(d)
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
        i64::try_from(v)
            .map(Value::Int)
            .map_err(|_| E::custom(format!("integer {v} out of 64-bit signed range")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        Value::float(v).ok_or_else(|| E::custom("non-finite float"))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::Str(v.to_string()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::Str(v))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element::<Value>()? {
            out.push(v);
        }
        Ok(Value::List(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
        let mut out = BTreeMap::new();
        while let Some(k) = map.next_key::<String>()? {
            if k.is_empty() {
                return Err(de::Error::custom("empty map key"));
            }
            let v = map.next_value::<Value>()?;
            if out.insert(k.clone(), v).is_some() {
                return Err(de::Error::custom(format!("duplicate map key `{k}`")));
            }
        }
        Ok(Value::Map(out))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        d.deserialize_any(ValueVisitor)
    }
}

/// One record: attribute name to value. Names are non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize)]
#[serde(transparent)]
pub struct Row(BTreeMap<String, Value>);

impl Row {
    pub fn new() -> Self {
        Row(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    /// Inserts an attribute. Panics on an empty name.
    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) -> Option<Value> {
        let name = name.into();
        assert!(!name.is_empty(), "attribute names must be non-empty");
        self.0.insert(name, value.into())
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Value> {
        self.0
    }

    pub fn as_map(&self) -> &BTreeMap<String, Value> {
        &self.0
    }
}

impl TryFrom<BTreeMap<String, Value>> for Row {
    type Error = String;

    fn try_from(m: BTreeMap<String, Value>) -> Result<Self, String> {
        if m.keys().any(|k| k.is_empty()) {
            return Err("empty attribute name".into());
        }
        Ok(Row(m))
    }
}

impl<K: Into<String>, V: Into<Value>> FromIterator<(K, V)> for Row {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut row = Row::new();
        for (k, v) in iter {
            row.insert(k, v);
        }
        row
    }
}

impl<'de> Deserialize<'de> for Row {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Row, D::Error> {
        match Value::deserialize(d)? {
            Value::Map(m) => Ok(Row(m)),
            other => Err(de::Error::custom(format!(
                "row must be an object, got {}",
                other.type_name()
            ))),
        }
    }
}

/// Builds a row from literal pairs: `row! { "a" => 1, "b" => "x" }`.
#[macro_export]
macro_rules! row {
    () => { $crate::value::Row::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut r = $crate::value::Row::new();
        $( r.insert($k, $crate::value::Value::from($v)); )+
        r
    }};
}

/// Declared type of an attribute in a table schema or an operator attribute spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredType {
    #[serde(alias = "text", alias = "str")]
    String,
    #[serde(alias = "int")]
    Integer,
    #[serde(alias = "number", alias = "real", alias = "double")]
    Float,
    #[serde(alias = "bool")]
    Boolean,
    #[serde(alias = "array")]
    List,
    #[serde(alias = "object")]
    Map,
    Any,
}

impl DeclaredType {
    /// Null conforms to every type; floats accept integers.
    pub fn accepts(self, v: &Value) -> bool {
        matches!(
            (self, v),
            (_, Value::Null)
                | (DeclaredType::Any, _)
                | (DeclaredType::String, Value::Str(_))
                | (DeclaredType::Integer, Value::Int(_))
                | (DeclaredType::Float, Value::Int(_) | Value::Float(_))
                | (DeclaredType::Boolean, Value::Bool(_))
                | (DeclaredType::List, Value::List(_))
                | (DeclaredType::Map, Value::Map(_))
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            DeclaredType::String => "string",
            DeclaredType::Integer => "integer",
            DeclaredType::Float => "float",
            DeclaredType::Boolean => "boolean",
            DeclaredType::List => "list",
            DeclaredType::Map => "map",
            DeclaredType::Any => "any",
        }
    }
}

impl fmt::Display for DeclaredType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Schema entry for one column. Deserializes from either a bare type name
/// (`"integer"`) or an object `{type, description?, required?}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ColumnSpec {
    #[serde(rename = "type")]
    pub ty: DeclaredType,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(skip_serializing_if = "is_false")]
    pub required: bool,
}

impl ColumnSpec {
    pub fn new(ty: DeclaredType) -> Self {
        ColumnSpec {
            ty,
            description: String::new(),
            required: false,
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn described(mut self, d: impl Into<String>) -> Self {
        self.description = d.into();
        self
    }
}

impl<'de> Deserialize<'de> for ColumnSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Full {
            #[serde(rename = "type")]
            ty: DeclaredType,
            #[serde(default)]
            description: String,
            #[serde(default)]
            required: bool,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Short(DeclaredType),
            Full(Full),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Short(ty) => ColumnSpec::new(ty),
            Repr::Full(f) => ColumnSpec {
                ty: f.ty,
                description: f.description,
                required: f.required,
            },
        })
    }
}

/// Column name to spec, in declaration order. Equality ignores order.
pub type Schema = IndexMap<String, ColumnSpec>;

/// Builds a schema of plain typed columns.
pub fn schema_of<'a>(cols: impl IntoIterator<Item = (&'a str, DeclaredType)>) -> Schema {
    cols.into_iter()
        .map(|(n, t)| (n.to_string(), ColumnSpec::new(t)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub rows: Vec<Row>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Schema>,
}

impl Table {
    pub fn new(rows: Vec<Row>) -> Self {
        Table { rows, schema: None }
    }

    pub fn with_schema(rows: Vec<Row>, schema: Schema) -> Self {
        Table {
            rows,
            schema: Some(schema),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Attribute names in schema order if a schema exists, else the sorted
    /// union of row keys.
    pub fn columns(&self) -> Vec<String> {
        if let Some(schema) = &self.schema {
            let mut cols: Vec<String> = schema.keys().cloned().collect();
            for row in &self.rows {
                for k in row.keys() {
                    if !schema.contains_key(k) && !cols.contains(k) {
                        cols.push(k.clone());
                    }
                }
            }
            return cols;
        }
        let mut set = std::collections::BTreeSet::new();
        for row in &self.rows {
            set.extend(row.keys().cloned());
        }
        set.into_iter().collect()
    }
}

/// The universal operator payload. Table order is significant: table `i`
/// arrives on input port `i`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBatch {
    pub tables: Vec<Table>,
}

impl DataBatch {
    pub fn empty() -> Self {
        DataBatch { tables: Vec::new() }
    }

    pub fn single(table: Table) -> Self {
        DataBatch { tables: vec![table] }
    }

    pub fn table(&self, port: usize) -> Option<&Table> {
        self.tables.get(port)
    }

    /// Total row count over all tables.
    pub fn row_count(&self) -> usize {
        self.tables.iter().map(Table::len).sum()
    }
}
