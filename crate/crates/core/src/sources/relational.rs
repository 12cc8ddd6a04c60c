//! SQLite-backed relational source, loaded from a database file or CSV files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::types::{Value as SqlValue, ValueRef};
use rusqlite::{Connection, OpenFlags};

use crate::error::{Error, Result};
use crate::registry::{Level, MetadataEntry, Statistics, MAX_SAMPLES};
use crate::value::{ColumnSpec, DeclaredType, Row, Schema, Table, Value};

#[derive(Debug)]
pub struct RelationalSource {
    source_id: String,
    database: String,
    conn: Mutex<Connection>,
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn from_sql(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::Int(i),
        ValueRef::Real(f) => Value::float(f).unwrap_or(Value::Null),
        ValueRef::Text(t) => Value::Str(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::Str(hex::encode(b)),
    }
}

/// Narrowest declared type covering every non-null value of a column.
fn infer_type<'a>(values: impl Iterator<Item = &'a Value>) -> DeclaredType {
    let mut ty: Option<DeclaredType> = None;
    for v in values {
        let t = match v {
            Value::Null => continue,
            Value::Int(_) => DeclaredType::Integer,
            Value::Float(_) => DeclaredType::Float,
            Value::Str(_) => DeclaredType::String,
            Value::Bool(_) => DeclaredType::Boolean,
            _ => DeclaredType::Any,
        };
        ty = Some(match (ty, t) {
            (None, t) => t,
            (Some(a), b) if a == b => a,
            (Some(DeclaredType::Integer), DeclaredType::Float) | (Some(DeclaredType::Float), DeclaredType::Integer) => {
                DeclaredType::Float
            }
            _ => DeclaredType::Any,
        });
    }
    ty.unwrap_or(DeclaredType::Any)
}

fn parse_cell(s: &str) -> SqlValue {
    if s.is_empty() {
        SqlValue::Null
    } else if let Ok(i) = s.parse::<i64>() {
        SqlValue::Integer(i)
    } else if let Some(f) = s.parse::<f64>().ok().filter(|f| f.is_finite()) {
        SqlValue::Real(f)
    } else {
        SqlValue::Text(s.to_string())
    }
}

impl RelationalSource {
    pub fn new(source_id: impl Into<String>, conn: Connection, database: impl Into<String>) -> Self {
        RelationalSource {
            source_id: source_id.into(),
            database: database.into(),
            conn: Mutex::new(conn),
        }
    }

    /// Builds a source from a connection map. Recognized keys: `path` (an
    /// SQLite file, opened read-only), `csv` (table name to CSV file),
    /// `csv_dir` (every `*.csv` file, table named after the file stem) and
    /// `database` (the database-level metadata name, default `main`).
    pub fn open(source_id: &str, connection: &BTreeMap<String, Value>, base_dir: &Path) -> Result<Self> {
        let unreachable = |m: String| Error::Connectivity {
            source_id: source_id.to_string(),
            message: m,
        };
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let database = connection
            .get("database")
            .and_then(Value::as_str)
            .unwrap_or("main")
            .to_string();

        if let Some(path) = connection.get("path").and_then(Value::as_str) {
            let path = resolve(path);
            if !path.exists() {
                return Err(unreachable(format!("database file {} not found", path.display())));
            }
            let conn = Connection::open_with_flags(&path, OpenFlags::SQLITE_OPEN_READ_ONLY)
                .map_err(|e| unreachable(e.to_string()))?;
            return Ok(Self::new(source_id, conn, database));
        }

        let mut files: Vec<(String, PathBuf)> = Vec::new();
        if let Some(map) = connection.get("csv").and_then(Value::as_map) {
            for (table, p) in map {
                let p = p
                    .as_str()
                    .ok_or_else(|| Error::invalid("csv connection", format!("path for `{table}` must be a string")))?;
                files.push((table.clone(), resolve(p)));
            }
        }
        if let Some(dir) = connection.get("csv_dir").and_then(Value::as_str) {
            let dir = resolve(dir);
            let entries = std::fs::read_dir(&dir).map_err(|e| unreachable(format!("{}: {e}", dir.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            for p in found {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                files.push((stem, p));
            }
        }
        let conn = Connection::open_in_memory().map_err(|e| unreachable(e.to_string()))?;
        for (table, path) in &files {
            load_csv(&conn, table, path).map_err(|e| match e {
                Error::Io(io) => unreachable(format!("{}: {io}", path.display())),
                other => other,
            })?;
        }
        conn.execute_batch("PRAGMA query_only = ON;")
            .map_err(|e| unreachable(e.to_string()))?;
        Ok(Self::new(source_id, conn, database))
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn database(&self) -> &str {
        &self.database
    }

    /// Runs a single read-only statement. Column order becomes schema order.
    pub fn query(&self, statement: &str) -> Result<Table> {
        let conn = self.conn.lock().unwrap();
        let query_err = |m: String| Error::Query {
            source_id: self.source_id.clone(),
            message: m,
        };
        let mut stmt = conn.prepare(statement).map_err(|e| match e {
            rusqlite::Error::MultipleStatement => Error::Policy("only a single statement is allowed".into()),
            other => query_err(other.to_string()),
        })?;
        if !stmt.readonly() || stmt.column_count() == 0 {
            return Err(Error::Policy(format!(
                "source `{}` accepts read-only queries only",
                self.source_id
            )));
        }
        let names: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(query_err(format!("result column name `{n}` is empty or repeated")));
            }
        }
        let mut rows = Vec::new();
        let mut cursor = stmt.query([]).map_err(|e| query_err(e.to_string()))?;
        while let Some(r) = cursor.next().map_err(|e| query_err(e.to_string()))? {
            let mut row = Row::new();
            for (i, n) in names.iter().enumerate() {
                let v = r.get_ref(i).map_err(|e| query_err(e.to_string()))?;
                row.insert(n.clone(), from_sql(v));
            }
            rows.push(row);
        }
        let schema: Schema = names
            .iter()
            .map(|n| {
                let ty = infer_type(rows.iter().filter_map(|r: &Row| r.get(n)));
                (n.clone(), ColumnSpec::new(ty))
            })
            .collect();
        Ok(Table::with_schema(rows, schema))
    }

    /// User tables and views, sorted by name.
    pub fn tables(&self) -> Result<Vec<String>> {
        let t = self.query(
            "SELECT name FROM sqlite_master WHERE type IN ('table','view') \
             AND name NOT LIKE 'sqlite_%' ORDER BY name",
        )?;
        Ok(t.rows
            .iter()
            .filter_map(|r| r.get("name").and_then(Value::as_str).map(str::to_string))
            .collect())
    }

    fn scalar(&self, sql: &str) -> Result<Value> {
        let t = self.query(sql)?;
        Ok(t.rows
            .first()
            .and_then(|r| r.iter().next().map(|(_, v)| v.clone()))
            .unwrap_or(Value::Null))
    }

    /// Database, collection and attribute entries with statistics and samples.
    pub fn collect_metadata(&self) -> Result<Vec<MetadataEntry>> {
        let src = self.source_id.clone();
        let db = self.database.clone();
        let mut out = vec![MetadataEntry::new(
            vec![src.clone(), db.clone()],
            Level::Database,
            format!("relational database {db}"),
        )];
        for table in self.tables()? {
            let qt = quote_ident(&table);
            let row_count = self
                .scalar(&format!("SELECT COUNT(*) FROM {qt}"))?
                .as_i64()
                .unwrap_or(0) as u64;
            let columns = self.query(&format!("SELECT * FROM {qt} LIMIT 0"))?;
            let names: Vec<String> = columns.schema.map(|s| s.keys().cloned().collect()).unwrap_or_default();
            let mut coll = MetadataEntry::new(
                vec![src.clone(), db.clone(), table.clone()],
                Level::Collection,
                format!("table {table} with columns {}", names.join(", ")),
            );
            coll.statistics.row_count = Some(row_count);
            out.push(coll);
            for col in names {
                let qc = quote_ident(&col);
                let stats = self.query(&format!(
                    "SELECT COUNT(DISTINCT {qc}) AS d, MIN({qc}) AS lo, MAX({qc}) AS hi FROM {qt}"
                ))?;
                let stats = &stats.rows[0];
                let samples = self.query(&format!(
                    "SELECT DISTINCT {qc} AS v FROM {qt} WHERE {qc} IS NOT NULL ORDER BY {qc} LIMIT {MAX_SAMPLES}"
                ))?;
                let samples: Vec<Value> = samples.rows.iter().filter_map(|r| r.get("v").cloned()).collect();
                let all = self.query(&format!("SELECT {qc} AS v FROM {qt}"))?;
                let ty = infer_type(all.rows.iter().filter_map(|r| r.get("v")));
                let non_null = |v: Option<&Value>| v.filter(|v| !v.is_null()).cloned();
                let mut e = MetadataEntry::new(
                    vec![src.clone(), db.clone(), table.clone(), col.clone()],
                    Level::Attribute,
                    format!("column {col} of table {table}"),
                );
                e.samples = samples;
                e.data_type = Some(ty);
                e.statistics = Statistics {
                    row_count: Some(row_count),
                    distinct_count: stats.get("d").and_then(Value::as_i64).map(|d| d as u64),
                    min: non_null(stats.get("lo")),
                    max: non_null(stats.get("hi")),
                };
                out.push(e);
            }
        }
        Ok(out)
    }
}

fn load_csv(conn: &Connection, table: &str, path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid("csv file", format!("{}: {other:?}", path.display())),
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::invalid("csv header", format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut records: Vec<Vec<SqlValue>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::invalid("csv record", format!("{}: {e}", path.display())))?;
        records.push(rec.iter().map(parse_cell).collect());
    }
    let col_types: Vec<&str> = (0..headers.len())
        .map(|i| {
            let mut ty = "";
            for r in &records {
                let t = match r.get(i) {
                    Some(SqlValue::Integer(_)) => "INTEGER",
                    Some(SqlValue::Real(_)) => "REAL",
                    Some(SqlValue::Text(_)) => "TEXT",
                    _ => continue,
                };
                ty = match (ty, t) {
                    ("", t) => t,
                    (a, b) if a == b => a,
                    ("INTEGER", "REAL") | ("REAL", "INTEGER") => "REAL",
                    _ => "TEXT",
                };
            }
            if ty.is_empty() {
                "TEXT"
            } else {
                ty
            }
        })
        .collect();
    let cols: Vec<String> = headers
        .iter()
        .zip(&col_types)
        .map(|(h, t)| format!("{} {t}", quote_ident(h)))
        .collect();
    let sql_err = |e: rusqlite::Error| Error::Internal(format!("loading {}: {e}", path.display()));
    conn.execute(
        &format!("CREATE TABLE {} ({})", quote_ident(table), cols.join(", ")),
        [],
    )
    .map_err(sql_err)?;
    let placeholders = vec!["?"; headers.len()].join(", ");
    let mut insert = conn
        .prepare(&format!("INSERT INTO {} VALUES ({placeholders})", quote_ident(table)))
        .map_err(sql_err)?;
    for r in records {
        // mixed INTEGER/REAL columns store reals; TEXT columns keep text
        insert.execute(rusqlite::params_from_iter(r)).map_err(sql_err)?;
    }
    Ok(())
}
