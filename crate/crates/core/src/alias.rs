//! Alias table: mention-surface → entity anchor statistics.
//!
//! Built from an anchor corpus (internal links, redirects, page titles,
//! each contributing one occurrence). The table defines the linking prior
//! `P(e|m) = freq(m,e) / freq(m)` and its top-1 disambiguation. Counts
//! are exact integers; priors are computed on demand so the per-mention
//! probabilities always sum to one.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::kgstore::KnowledgeGraph;
use crate::text::normalize;

#[derive(Debug, Error)]
pub enum AliasError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Anchors dropped during construction, by reason.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AliasDiagnostics {
    /// Anchor referenced an entity absent from the knowledge graph.
    pub skipped_unknown_entity: u64,
    /// Surface normalized to the empty string.
    pub skipped_empty_surface: u64,
}

/// Mention → candidate entity counts. Keys are normalized surfaces.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AliasTable {
    table: BTreeMap<String, BTreeMap<String, u64>>,
    total: BTreeMap<String, u64>,
    max_mention_chars: usize,
    pub diagnostics: AliasDiagnostics,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of distinct mentions.
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Length in chars of the longest mention; the linker's scan bound.
    pub fn max_mention_chars(&self) -> usize {
        self.max_mention_chars
    }

    /// True when the (already normalized) surface has candidates.
    pub fn contains_normalized(&self, mention: &str) -> bool {
        self.table.contains_key(mention)
    }

    fn add_count(&mut self, mention: String, entity_id: String, count: u64) {
        self.max_mention_chars = self.max_mention_chars.max(mention.chars().count());
        *self.total.entry(mention.clone()).or_insert(0) += count;
        *self
            .table
            .entry(mention)
            .or_default()
            .entry(entity_id)
            .or_insert(0) += count;
    }

    /// Anchor occurrences of surface `m` pointing at `e`.
    pub fn freq_pair(&self, mention: &str, entity_id: &str) -> u64 {
        self.table
            .get(&normalize(mention))
            .and_then(|c| c.get(entity_id))
            .copied()
            .unwrap_or(0)
    }

    /// Total anchor occurrences of surface `m`.
    pub fn freq(&self, mention: &str) -> u64 {
        self.total.get(&normalize(mention)).copied().unwrap_or(0)
    }

    /// Linking prior `P(e|m) = freq(m,e) / freq(m)`; 0 when the mention is
    /// unknown or the entity is not among its candidates.
    pub fn prior(&self, mention: &str, entity_id: &str) -> f64 {
        let key = normalize(mention);
        let Some(total) = self.total.get(&key) else {
            return 0.0;
        };
        match self.table.get(&key).and_then(|c| c.get(entity_id)) {
            Some(count) => *count as f64 / *total as f64,
            None => 0.0,
        }
    }

    /// Highest-count candidate for the mention; ties broken by the
    /// lexicographically smallest entity id. `None` for unknown mentions.
    pub fn top1(&self, mention: &str) -> Option<&str> {
        self.top1_normalized(&normalize(mention))
    }

    /// [`AliasTable::top1`] for a surface that is already normalized.
    pub fn top1_normalized(&self, mention: &str) -> Option<&str> {
        let candidates = self.table.get(mention)?;
        let mut best: Option<(&str, u64)> = None;
        // ascending id order, strictly-greater wins: first max id-wise is kept
        for (id, &count) in candidates {
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((id, count));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Candidate `(entity_id, count)` pairs in ascending id order.
    pub fn candidates(&self, mention: &str) -> impl Iterator<Item = (&str, u64)> {
        self.table
            .get(&normalize(mention))
            .into_iter()
            .flat_map(|c| c.iter().map(|(id, &n)| (id.as_str(), n)))
    }

    /// Distinct normalized mentions in ascending order.
    pub fn mentions(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    /// Absorbs another shard by count addition. Associative and
    /// commutative, so disjoint corpus shards can be counted
    /// independently and merged in any order.
    pub fn merge(&mut self, other: AliasTable) {
        for (mention, candidates) in other.table {
            for (entity_id, count) in candidates {
                self.add_count(mention.clone(), entity_id, count);
            }
        }
        self.diagnostics.skipped_unknown_entity += other.diagnostics.skipped_unknown_entity;
        self.diagnostics.skipped_empty_surface += other.diagnostics.skipped_empty_surface;
    }

    /// Writes `mention<TAB>entity_id<TAB>count`, one candidate per line,
    /// sorted by (mention, descending count, entity_id) for stable diffs.
    pub fn save(&self, path: &Path) -> Result<(), AliasError> {
        let io_err = |e| AliasError::Io { path: path.display().to_string(), source: e };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let io_err = |e| AliasError::Io { path: path.display().to_string(), source: e };
        for (mention, candidates) in &self.table {
            let mut rows: Vec<(&String, u64)> = candidates.iter().map(|(id, &n)| (id, n)).collect();
            rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            for (entity_id, count) in rows {
                writeln!(w, "{mention}\t{entity_id}\t{count}").map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads a table written by [`AliasTable::save`].
    pub fn load(path: &Path) -> Result<AliasTable, AliasError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| AliasError::Io { path: name.clone(), source: e })?;
        let mut at = AliasTable::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| AliasError::Io { path: name.clone(), source: e })?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(AliasError::Parse {
                    path: name.clone(),
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let count: u64 = fields[2].parse().map_err(|_| AliasError::Parse {
                path: name.clone(),
                line: lineno,
                msg: format!("bad count {:?}", fields[2]),
            })?;
            if count == 0 {
                return Err(AliasError::Parse {
                    path: name.clone(),
                    line: lineno,
                    msg: "zero count".to_string(),
                });
            }
            at.add_count(fields[0].to_string(), fields[1].to_string(), count);
        }
        Ok(at)
    }
}

/// Counts (normalized surface, entity) occurrences over an anchor stream.
/// Anchors naming entities absent from `kg` are skipped and tallied, as
/// are surfaces that normalize to the empty string.
pub fn build_alias_table(
    anchors: impl IntoIterator<Item = (String, String)>,
    kg: &KnowledgeGraph,
) -> AliasTable {
    let mut at = AliasTable::new();
    for (surface, entity_id) in anchors {
        if !kg.contains(&entity_id) {
            at.diagnostics.skipped_unknown_entity += 1;
            continue;
        }
        let mention = normalize(&surface);
        if mention.is_empty() {
            at.diagnostics.skipped_empty_surface += 1;
            continue;
        }
        at.add_count(mention, entity_id, 1);
    }
    at
}

/// Streams `surface<TAB>entity_id` anchor records from a file into
/// [`build_alias_table`].
pub fn build_alias_table_from_file(path: &Path, kg: &KnowledgeGraph) -> Result<AliasTable, AliasError> {
    let anchors = read_anchor_file(path)?;
    Ok(build_alias_table(anchors, kg))
}

/// Parses an anchor corpus: one `surface<TAB>entity_id` record per line.
pub fn read_anchor_file(path: &Path) -> Result<Vec<(String, String)>, AliasError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| AliasError::Io { path: name.clone(), source: e })?;
    let mut anchors = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| AliasError::Io { path: name.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let Some((surface, entity_id)) = line.split_once('\t') else {
            return Err(AliasError::Parse {
                path: name.clone(),
                line: lineno,
                msg: "expected surface<TAB>entity_id".to_string(),
            });
        };
        anchors.push((surface.to_string(), entity_id.to_string()));
    }
    Ok(anchors)
}
