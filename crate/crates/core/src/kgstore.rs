//! Global knowledge graph store.
//!
//! Holds entities (with unique ids and unique titles), relation triples,
//! and dataset-specific augmentation entities (brands, categories,
//! products) that carry reduced base weights. The store is immutable
//! after loading and safe to share across readers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where an entity comes from. Global entities carry full weight;
/// dataset augmentation entities are down-weighted by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntitySource {
    Global,
    Brand,
    Category,
    Product,
}

impl EntitySource {
    /// Base weight multiplied into an entity's term frequency:
    /// 1.0 for global entities, 0.5 / 0.3 / 0.1 for brand / category /
    /// product augmentation entities.
    pub fn base_weight(self) -> f64 {
        match self {
            EntitySource::Global => 1.0,
            EntitySource::Brand => 0.5,
            EntitySource::Category => 0.3,
            EntitySource::Product => 0.1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EntitySource::Global => "global",
            EntitySource::Brand => "brand",
            EntitySource::Category => "category",
            EntitySource::Product => "product",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(EntitySource::Global),
            "brand" => Some(EntitySource::Brand),
            "category" => Some(EntitySource::Category),
            "product" => Some(EntitySource::Product),
            _ => None,
        }
    }
}

impl fmt::Display for EntitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A knowledge-graph entity. `title` doubles as the entity's unambiguous
/// textual serialization, so it must be unique within a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub entity_id: String,
    pub title: String,
    pub source: EntitySource,
    pub base_weight: f64,
}

impl Entity {
    pub fn new(entity_id: impl Into<String>, title: impl Into<String>, source: EntitySource) -> Self {
        Entity {
            entity_id: entity_id.into(),
            title: title.into(),
            base_weight: source.base_weight(),
            source,
        }
    }
}

/// A directed relation between two entities already present in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub head: String,
    pub relation_type: String,
    pub tail: String,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: duplicate entity id {id:?}")]
    DuplicateEntityId { path: String, line: usize, id: String },
    #[error("{path}:{line}: duplicate title {title:?} (already used by entity {existing:?})")]
    DuplicateTitle {
        path: String,
        line: usize,
        title: String,
        existing: String,
    },
}

/// Non-fatal observations from a load: triples that referenced unknown
/// entities are dropped rather than stored.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LoadDiagnostics {
    pub rejected_triples: usize,
}

/// The global knowledge graph: entities keyed by id, relation triples,
/// and the inverse title index.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    triples: Vec<Triple>,
    title_index: BTreeMap<String, String>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.entities.contains_key(entity_id)
    }

    pub fn get(&self, entity_id: &str) -> Option<&Entity> {
        self.entities.get(entity_id)
    }

    /// Entity id owning the given (exact) title.
    pub fn resolve_title(&self, title: &str) -> Option<&str> {
        self.title_index.get(title).map(String::as_str)
    }

    pub fn base_weight(&self, entity_id: &str) -> Option<f64> {
        self.entities.get(entity_id).map(|e| e.base_weight)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    fn insert_entity_at(&mut self, entity: Entity, path: &str, line: usize) -> Result<(), KgError> {
        if self.entities.contains_key(&entity.entity_id) {
            return Err(KgError::DuplicateEntityId {
                path: path.to_string(),
                line,
                id: entity.entity_id,
            });
        }
        if let Some(existing) = self.title_index.get(&entity.title) {
            return Err(KgError::DuplicateTitle {
                path: path.to_string(),
                line,
                title: entity.title,
                existing: existing.clone(),
            });
        }
        self.title_index.insert(entity.title.clone(), entity.entity_id.clone());
        self.entities.insert(entity.entity_id.clone(), entity);
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>, KgError> {
    File::open(path).map(BufReader::new).map_err(|e| KgError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a knowledge graph from line-delimited files.
///
/// Entities: `id<TAB>title[<TAB>source]`, one per line; `source` defaults
/// to `global`. Triples: `head<TAB>relation<TAB>tail`. Duplicate ids or
/// titles are load errors; triples referencing unknown entities are
/// rejected and tallied in the diagnostics.
pub fn load_kg(
    entities_path: &Path,
    triples_path: Option<&Path>,
) -> Result<(KnowledgeGraph, LoadDiagnostics), KgError> {
    let mut kg = KnowledgeGraph::new();
    let mut diag = LoadDiagnostics::default();

    let epath = entities_path.display().to_string();
    for (idx, line) in open(entities_path)?.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| KgError::Io { path: epath.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(KgError::Parse {
                path: epath.clone(),
                line: lineno,
                msg: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (id, title) = (fields[0], fields[1]);
        if id.is_empty() || title.is_empty() {
            return Err(KgError::Parse {
                path: epath.clone(),
                line: lineno,
                msg: "empty id or title".to_string(),
            });
        }
        let source = match fields.get(2) {
            None => EntitySource::Global,
            Some(s) => EntitySource::parse(s).ok_or_else(|| KgError::Parse {
                path: epath.clone(),
                line: lineno,
                msg: format!("unknown entity source {s:?}"),
            })?,
        };
        kg.insert_entity_at(Entity::new(id, title, source), &epath, lineno)?;
    }

    if let Some(tpath) = triples_path {
        let tname = tpath.display().to_string();
        for (idx, line) in open(tpath)?.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| KgError::Io { path: tname.clone(), source: e })?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::Parse {
                    path: tname.clone(),
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            if !kg.contains(fields[0]) || !kg.contains(fields[2]) {
                diag.rejected_triples += 1;
                continue;
            }
            kg.triples.push(Triple {
                head: fields[0].to_string(),
                relation_type: fields[1].to_string(),
                tail: fields[2].to_string(),
            });
        }
    }

    Ok((kg, diag))
}

/// Deterministic id for a dataset augmentation entity.
pub fn augmentation_id(source: EntitySource, name: &str) -> String {
    format!("{}:{}", source.label(), name)
}

/// Walks the deterministic id sequence for `(source, name)` until it
/// finds the already-registered entity (`Ok`) or the first free id
/// (`Err`). Registration and lookup share this walk so they always agree.
fn augmentation_slot(kg: &KnowledgeGraph, source: EntitySource, name: &str) -> Result<String, String> {
    let mut id = augmentation_id(source, name);
    loop {
        match kg.get(&id) {
            None => return Err(id),
            Some(e) if e.source == source && e.title.starts_with(name) => return Ok(id),
            // id squatted by an unrelated entity; extend deterministically
            Some(_) => id.push('#'),
        }
    }
}

/// Id of the augmentation entity registered for `(source, name)`, if any.
pub fn resolve_augmentation(kg: &KnowledgeGraph, source: EntitySource, name: &str) -> Option<String> {
    augmentation_slot(kg, source, name).ok()
}

/// Registers dataset attribute names (brands, categories, products) as
/// augmentation entities. Distinct names become one entity each; names
/// whose title collides with an existing title get a deterministic
/// `#<kind>` suffix. Re-applying the same attributes is a no-op.
pub fn augment_domain_entities(
    kg: &mut KnowledgeGraph,
    attributes: impl IntoIterator<Item = (EntitySource, String)>,
) {
    for (source, name) in attributes {
        if source == EntitySource::Global || name.is_empty() {
            continue;
        }
        let Err(id) = augmentation_slot(kg, source, &name) else {
            continue; // already registered by an earlier pass or item
        };
        let mut title = name.clone();
        while kg.title_index.contains_key(&title) {
            title.push('#');
            title.push_str(source.label());
        }
        let entity = Entity::new(id, title, source);
        kg.title_index.insert(entity.title.clone(), entity.entity_id.clone());
        kg.entities.insert(entity.entity_id.clone(), entity);
    }
}
