//! In-memory vector collections with exhaustive cosine search.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::registry::{cosine, embed, Level, MetadataEntry, Statistics};
use crate::value::{Row, Table, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub vector: Vec<f64>,
    pub payload: Row,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Collection {
    pub description: String,
    pub dim: usize,
    pub items: Vec<Item>,
}

#[derive(Deserialize)]
struct ItemFile {
    id: String,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    payload: Row,
}

#[derive(Deserialize)]
struct CollectionFile {
    #[serde(default)]
    description: String,
    items: Vec<ItemFile>,
}

#[derive(Deserialize)]
struct StoreFile {
    collections: BTreeMap<String, CollectionFile>,
}

#[derive(Debug, Default)]
pub struct VectorSource {
    source_id: String,
    collections: BTreeMap<String, Collection>,
}

impl VectorSource {
    pub fn new(source_id: impl Into<String>) -> Self {
        VectorSource {
            source_id: source_id.into(),
            collections: BTreeMap::new(),
        }
    }

    /// Loads `{collections: {name: {description, items: [{id, vector?, text?, payload}]}}}`.
    /// Items without a vector are embedded from `text`.
    pub fn from_file(source_id: &str, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Connectivity {
            source_id: source_id.to_string(),
            message: format!("{}: {e}", path.display()),
        })?;
        let file: StoreFile = serde_json::from_str(&text)?;
        let mut src = VectorSource::new(source_id);
        for (name, c) in file.collections {
            let mut coll = Collection {
                description: c.description,
                ..Collection::default()
            };
            for it in c.items {
                let vector = match (it.vector, it.text) {
                    (Some(v), _) => v,
                    (None, Some(t)) => embed(&t),
                    (None, None) => {
                        return Err(Error::invalid(
                            "vector item",
                            format!("`{}` has neither vector nor text", it.id),
                        ))
                    }
                };
                src.check_dim(&name, &mut coll, &vector)?;
                coll.items.push(Item {
                    id: it.id,
                    vector,
                    payload: it.payload,
                });
            }
            src.collections.insert(name, coll);
        }
        Ok(src)
    }

    fn check_dim(&self, name: &str, coll: &mut Collection, v: &[f64]) -> Result<()> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vector", "components must be finite"));
        }
        if coll.items.is_empty() && coll.dim == 0 {
            coll.dim = v.len();
        } else if coll.dim != v.len() {
            return Err(Error::invalid(
                "vector",
                format!("collection `{name}` has dimension {}, got {}", coll.dim, v.len()),
            ));
        }
        Ok(())
    }

    pub fn create_collection(&mut self, name: &str, dim: usize, description: &str) {
        self.collections.insert(
            name.to_string(),
            Collection {
                description: description.to_string(),
                dim,
                items: Vec::new(),
            },
        );
    }

    pub fn insert(&mut self, collection: &str, id: &str, vector: Vec<f64>, payload: Row) -> Result<()> {
        let mut coll = self
            .collections
            .remove(collection)
            .ok_or_else(|| Error::not_found("collection", collection))?;
        let checked = self.check_dim(collection, &mut coll, &vector);
        if checked.is_ok() {
            coll.items.push(Item {
                id: id.to_string(),
                vector,
                payload,
            });
        }
        self.collections.insert(collection.to_string(), coll);
        checked
    }

    pub fn collection(&self, name: &str) -> Option<&Collection> {
        self.collections.get(name)
    }

    pub fn collection_names(&self) -> Vec<String> {
        self.collections.keys().cloned().collect()
    }

    /// Top-k items by cosine similarity, descending, ties by ascending id.
    /// Each row is the item payload plus `_score`.
    pub fn query(&self, collection: &str, query: &[f64], k: usize) -> Result<Table> {
        if k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        let coll = self
            .collections
            .get(collection)
            .ok_or_else(|| Error::not_found("collection", format!("{}/{collection}", self.source_id)))?;
        if query.len() != coll.dim {
            return Err(Error::invalid(
                "query vector",
                format!(
                    "collection `{collection}` has dimension {}, got {}",
                    coll.dim,
                    query.len()
                ),
            ));
        }
        let mut scored: Vec<(f64, &Item)> = coll.items.iter().map(|it| (cosine(query, &it.vector), it)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let rows = scored
            .into_iter()
            .take(k)
            .map(|(score, it)| {
                let mut row = it.payload.clone();
                row.insert("_score", Value::float(score).unwrap_or(Value::Null));
                row
            })
            .collect();
        Ok(Table::new(rows))
    }

    pub fn collect_metadata(&self) -> Vec<MetadataEntry> {
        let mut out = vec![MetadataEntry::new(
            vec![self.source_id.clone(), "index".into()],
            Level::Database,
            "vector index store",
        )];
        for (name, c) in &self.collections {
            let desc = if c.description.is_empty() {
                format!("vector collection {name}")
            } else {
                c.description.clone()
            };
            let mut e = MetadataEntry::new(
                vec![self.source_id.clone(), "index".into(), name.clone()],
                Level::Collection,
                desc,
            );
            e.statistics = Statistics {
                row_count: Some(c.items.len() as u64),
                ..Statistics::default()
            };
            e.samples = c
                .items
                .iter()
                .take(crate::registry::MAX_SAMPLES)
                .map(|i| Value::from(i.id.as_str()))
                .collect();
            out.push(e);
        }
        out
    }
}
