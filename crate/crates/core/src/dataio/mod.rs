//! Dataset files: interactions, items, and their ingestion.
//!
//! All formats are line-delimited tab-separated text (streamable and
//! diffable); field contents must not contain tabs or newlines. Ratings
//! convert to positives at ingestion: a record is kept iff its rating is
//! at least 4. Malformed lines are skipped and tallied; unreadable files
//! are fatal.

pub mod synth;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::kgstore::EntitySource;

/// Rating threshold for a positive interaction.
pub const POSITIVE_RATING: f64 = 4.0;

/// A positive user-item interaction. Only positives are stored; the
/// rating is consumed at ingestion.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: String,
}

/// An item as read from disk: free text plus raw attribute names that
/// become augmentation entities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawItem {
    pub item_id: String,
    pub domain: String,
    pub text: String,
    pub attributes: Vec<(EntitySource, String)>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Non-fatal ingestion observations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct IngestDiagnostics {
    pub malformed_interaction_lines: usize,
    pub malformed_item_lines: usize,
    pub non_positive_dropped: usize,
    pub duplicate_interactions: usize,
}

/// Reads `user<TAB>item<TAB>domain<TAB>rating` records, keeping
/// deduplicated positives in file order.
pub fn read_interactions(path: &Path) -> Result<(Vec<Interaction>, IngestDiagnostics), DataError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| DataError::Io { path: name.clone(), source: e })?;
    let mut out = Vec::new();
    let mut diag = IngestDiagnostics::default();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DataError::Io { path: name.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || fields[..3].iter().any(|f| f.is_empty()) {
            diag.malformed_interaction_lines += 1;
            continue;
        }
        let Ok(rating) = fields[3].parse::<f64>() else {
            diag.malformed_interaction_lines += 1;
            continue;
        };
        if rating < POSITIVE_RATING {
            diag.non_positive_dropped += 1;
            continue;
        }
        let key = (fields[0].to_string(), fields[1].to_string(), fields[2].to_string());
        if !seen.insert(key) {
            diag.duplicate_interactions += 1;
            continue;
        }
        out.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            domain: fields[2].to_string(),
        });
    }
    Ok((out, diag))
}

/// Reads `item<TAB>domain<TAB>text[<TAB>kind=name ...]` records where
/// `kind` is one of `brand`, `category`, `product`. Text may be empty.
pub fn read_items(path: &Path) -> Result<(Vec<RawItem>, IngestDiagnostics), DataError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| DataError::Io { path: name.clone(), source: e })?;
    let mut out = Vec::new();
    let mut diag = IngestDiagnostics::default();
    'line: for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DataError::Io { path: name.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields[0].is_empty() || fields[1].is_empty() {
            diag.malformed_item_lines += 1;
            continue;
        }
        let mut attributes = Vec::new();
        for attr in &fields[3..] {
            let parsed = attr.split_once('=').and_then(|(kind, v)| {
                let source = match kind {
                    "brand" => EntitySource::Brand,
                    "category" => EntitySource::Category,
                    "product" => EntitySource::Product,
                    _ => return None,
                };
                (!v.is_empty()).then(|| (source, v.to_string()))
            });
            match parsed {
                Some(pair) => attributes.push(pair),
                None => {
                    diag.malformed_item_lines += 1;
                    continue 'line;
                }
            }
        }
        out.push(RawItem {
            item_id: fields[0].to_string(),
            domain: fields[1].to_string(),
            text: fields[2].to_string(),
            attributes,
        });
    }
    Ok((out, diag))
}

/// Loads both dataset files, merging their diagnostics.
pub fn ingest(
    interactions_path: &Path,
    items_path: &Path,
) -> Result<(Vec<Interaction>, Vec<RawItem>, IngestDiagnostics), DataError> {
    let (interactions, d1) = read_interactions(interactions_path)?;
    let (items, d2) = read_items(items_path)?;
    Ok((
        interactions,
        items,
        IngestDiagnostics {
            malformed_interaction_lines: d1.malformed_interaction_lines,
            malformed_item_lines: d2.malformed_item_lines,
            non_positive_dropped: d1.non_positive_dropped,
            duplicate_interactions: d1.duplicate_interactions,
        },
    ))
}

pub fn write_items(path: &Path, items: &[RawItem]) -> Result<(), DataError> {
    let io_err = |e| DataError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let io_err = |e| DataError::Io { path: path.display().to_string(), source: e };
    for item in items {
        write!(w, "{}\t{}\t{}", item.item_id, item.domain, item.text).map_err(io_err)?;
        for (source, name) in &item.attributes {
            write!(w, "\t{}={}", source.label(), name).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes raw rating records (the pre-ingestion form).
pub fn write_rating_records(
    path: &Path,
    records: &[(String, String, String, f64)],
) -> Result<(), DataError> {
    let io_err = |e| DataError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let io_err = |e| DataError::Io { path: path.display().to_string(), source: e };
    for (user, item, domain, rating) in records {
        writeln!(w, "{user}\t{item}\t{domain}\t{rating}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn positivity_rule_keeps_rating_four_and_above() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "i.tsv",
            "u1\ti1\tbooks\t4\nu1\ti2\tbooks\t3\nu1\ti3\tbooks\t5\nu1\ti4\tbooks\t3.9\n",
        );
        let (records, diag) = read_interactions(&path).unwrap();
        let items: Vec<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(items, vec!["i1", "i3"]);
        assert_eq!(diag.non_positive_dropped, 2);
    }

    #[test]
    fn duplicate_interactions_collapse_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "i.tsv", "u\ti\td\t5\nu\ti\td\t4\nu\ti\tother\t4\n");
        let (records, diag) = read_interactions(&path).unwrap();
        assert_eq!(records.len(), 2); // same item in a second domain stays
        assert_eq!(diag.duplicate_interactions, 1);
    }

    #[test]
    fn malformed_lines_are_skipped_and_tallied() {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::new();
        for i in 0..98 {
            content.push_str(&format!("u{i}\ti{i}\td\t4\n"));
        }
        content.push_str("broken line without tabs\n");
        content.push_str("u\ti\td\tnot-a-number\n");
        let path = write(&dir, "i.tsv", &content);
        let (records, diag) = read_interactions(&path).unwrap();
        assert_eq!(records.len(), 98);
        assert_eq!(diag.malformed_interaction_lines, 2);
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(read_interactions(Path::new("/nonexistent/x.tsv")).is_err());
    }

    #[test]
    fn items_round_trip_with_attributes() {
        let items = vec![
            RawItem {
                item_id: "i1".into(),
                domain: "books".into(),
                text: "a jaguar story".into(),
                attributes: vec![
                    (EntitySource::Brand, "Sony".into()),
                    (EntitySource::Category, "Rock".into()),
                ],
            },
            RawItem {
                item_id: "i2".into(),
                domain: "movies".into(),
                text: String::new(),
                attributes: vec![],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.tsv");
        write_items(&path, &items).unwrap();
        let (loaded, diag) = read_items(&path).unwrap();
        assert_eq!(loaded, items);
        assert_eq!(diag.malformed_item_lines, 0);
    }

    #[test]
    fn unknown_attribute_kind_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "items.tsv", "i1\td\ttext\tcolor=red\ni2\td\tok\n");
        let (loaded, diag) = read_items(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].item_id, "i2");
        assert_eq!(diag.malformed_item_lines, 1);
    }

    #[test]
    fn ingestion_is_idempotent_after_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "i.tsv", "u\ta\td\t4\nu\tb\td\t5\nu\ta\td\t4\n");
        let (first, _) = read_interactions(&path).unwrap();
        let (second, _) = read_interactions(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.len(), 2);
    }
}
