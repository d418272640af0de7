//! Entity linking over item text.
//!
//! Mention candidates come from a greedy longest-match scan of the
//! normalized text against alias-table surfaces (a gazetteer pass that
//! works for any language); each mention resolves to its top-1 alias
//! candidate. An item's linked entity set is the union of those
//! resolutions with the item's explicit dataset entities.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::alias::AliasTable;
use crate::kgstore::KnowledgeGraph;
use crate::text::{is_word_char, normalize};

/// Minimum mention length in chars after normalization; shorter surfaces
/// are noise.
const MIN_MENTION_CHARS: usize = 2;

/// A recommendation item: free text plus explicit entity ids contributed
/// by dataset augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub domain: String,
    pub text: String,
    pub explicit_entities: Vec<String>,
}

/// An item's resolved entity set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkedItem {
    pub item_id: String,
    pub entities: BTreeSet<String>,
}

/// A matched surface. `start`/`end` are byte offsets into the normalized
/// text (`normalize(text)`), not the raw input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("item {item_id:?}: explicit entity {entity_id:?} is not in the knowledge graph")]
    UnknownExplicitEntity { item_id: String, entity_id: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Scans the normalized text left to right and returns non-overlapping
/// mentions; at each position the longest alias surface wins. Matches in
/// whitespace-separated scripts must start and end on word boundaries,
/// so "art" never fires inside "start".
pub fn extract_mentions(text: &str, at: &AliasTable) -> Vec<Mention> {
    let norm = normalize(text);
    let chars: Vec<(usize, char)> = norm.char_indices().collect();
    let n = chars.len();
    let max_len = at.max_mention_chars().min(n);
    let mut mentions = Vec::new();
    if max_len < MIN_MENTION_CHARS {
        return mentions;
    }

    let byte_at = |idx: usize| if idx < n { chars[idx].0 } else { norm.len() };

    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c == ' ' || (is_word_char(c) && i > 0 && is_word_char(chars[i - 1].1)) {
            i += 1;
            continue;
        }
        let mut matched = false;
        let upper = max_len.min(n - i);
        for len in (MIN_MENTION_CHARS..=upper).rev() {
            let end = i + len;
            let last = chars[end - 1].1;
            if is_word_char(last) && end < n && is_word_char(chars[end].1) {
                continue; // would split a word at the right edge
            }
            let surface = &norm[byte_at(i)..byte_at(end)];
            if at.contains_normalized(surface) {
                mentions.push(Mention {
                    start: byte_at(i),
                    end: byte_at(end),
                    surface: surface.to_string(),
                });
                i = end;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    mentions
}

/// Links one item: top-1 resolution of every extracted mention, unioned
/// with the item's explicit entities.
pub fn link_item(item: &Item, at: &AliasTable, kg: &KnowledgeGraph) -> Result<LinkedItem, LinkError> {
    let mut entities = BTreeSet::new();
    for mention in extract_mentions(&item.text, at) {
        if let Some(entity_id) = at.top1_normalized(&mention.surface) {
            entities.insert(entity_id.to_string());
        }
    }
    for entity_id in &item.explicit_entities {
        if !kg.contains(entity_id) {
            return Err(LinkError::UnknownExplicitEntity {
                item_id: item.item_id.clone(),
                entity_id: entity_id.clone(),
            });
        }
        entities.insert(entity_id.clone());
    }
    Ok(LinkedItem { item_id: item.item_id.clone(), entities })
}

/// Writes `item_id<TAB>entity...` with entity ids in ascending order.
pub fn write_linked_items(path: &Path, items: &[LinkedItem]) -> Result<(), LinkError> {
    let io_err = |e| LinkError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let io_err = |e| LinkError::Io { path: path.display().to_string(), source: e };
    for item in items {
        write!(w, "{}", item.item_id).map_err(io_err)?;
        for entity_id in &item.entities {
            write!(w, "\t{entity_id}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a file written by [`write_linked_items`].
pub fn read_linked_items(path: &Path) -> Result<Vec<LinkedItem>, LinkError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| LinkError::Io { path: name.clone(), source: e })?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LinkError::Io { path: name.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let item_id = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| LinkError::Parse {
            path: name.clone(),
            line: idx + 1,
            msg: "missing item id".to_string(),
        })?;
        items.push(LinkedItem {
            item_id: item_id.to_string(),
            entities: fields.map(str::to_string).collect(),
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alias::build_alias_table;
    use crate::kgstore::load_kg;

    fn fixture(ids_titles: &[(&str, &str)], anchors: &[(&str, &str, usize)]) -> (KnowledgeGraph, AliasTable) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        let mut content = String::new();
        for (id, title) in ids_titles {
            content.push_str(&format!("{id}\t{title}\n"));
        }
        std::fs::write(&path, content).unwrap();
        let (kg, _) = load_kg(&path, None).unwrap();
        let mut stream = Vec::new();
        for &(surface, entity, times) in anchors {
            for _ in 0..times {
                stream.push((surface.to_string(), entity.to_string()));
            }
        }
        let at = build_alias_table(stream, &kg);
        (kg, at)
    }

    #[test]
    fn longest_match_wins() {
        let (_, at) = fixture(
            &[("Q1", "club"), ("Q2", "city")],
            &[("manchester united f.c.", "Q1", 1), ("manchester", "Q2", 1)],
        );
        let mentions = extract_mentions("Manchester United F.C. won", &at);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].surface, "manchester united f.c.");
        assert_eq!(mentions[0].start, 0);
    }

    #[test]
    fn no_alias_hits_yields_nothing() {
        let (_, at) = fixture(&[("Q1", "x")], &[("jaguar", "Q1", 1)]);
        assert!(extract_mentions("nothing to see here", &at).is_empty());
        assert!(extract_mentions("", &at).is_empty());
    }

    /// Brute-force oracle: enumerate every boundary-respecting substring
    /// occurrence of an alias key, then greedily keep the longest match
    /// at each position scanning left to right.
    fn oracle_mentions(text: &str, at: &AliasTable) -> Vec<(usize, usize, String)> {
        let norm = normalize(text);
        let chars: Vec<(usize, char)> = norm.char_indices().collect();
        let n = chars.len();
        let byte_at = |idx: usize| if idx < n { chars[idx].0 } else { norm.len() };
        let boundary_ok = |start: usize, end: usize| {
            let first = chars[start].1;
            let last = chars[end - 1].1;
            (!is_word_char(first) || start == 0 || !is_word_char(chars[start - 1].1))
                && (!is_word_char(last) || end == n || !is_word_char(chars[end].1))
        };
        let mut candidates = Vec::new();
        for start in 0..n {
            for end in (start + 2)..=n {
                let surface = &norm[byte_at(start)..byte_at(end)];
                if at.contains_normalized(surface) && boundary_ok(start, end) {
                    candidates.push((start, end));
                }
            }
        }
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < n {
            let best = candidates
                .iter()
                .filter(|(s, _)| *s == pos)
                .max_by_key(|(_, e)| *e)
                .copied();
            match best {
                Some((s, e)) => {
                    out.push((byte_at(s), byte_at(e), norm[byte_at(s)..byte_at(e)].to_string()));
                    pos = e;
                }
                None => pos += 1,
            }
        }
        out
    }

    #[test]
    fn repeated_mentions_get_distinct_spans() {
        let (_, at) = fixture(&[("Qcar", "car")], &[("jaguar", "Qcar", 1)]);
        let got = extract_mentions("jaguar jaguar", &at);
        let want = oracle_mentions("jaguar jaguar", &at);
        assert_eq!(got.len(), 2);
        assert_ne!(got[0].start, got[1].start);
        let got_tuples: Vec<(usize, usize, String)> =
            got.iter().map(|m| (m.start, m.end, m.surface.clone())).collect();
        assert_eq!(got_tuples, want);
    }

    #[test]
    fn scanner_matches_oracle_on_tricky_text() {
        let (_, at) = fixture(
            &[("Q1", "a"), ("Q2", "b"), ("Q3", "c")],
            &[("art", "Q1", 1), ("star", "Q2", 1), ("start art", "Q3", 1)],
        );
        for text in [
            "start art",
            "start  art stART",
            "art start art",
            "restart artful art",
            "star tart",
        ] {
            let got: Vec<(usize, usize, String)> = extract_mentions(text, &at)
                .iter()
                .map(|m| (m.start, m.end, m.surface.clone()))
                .collect();
            assert_eq!(got, oracle_mentions(text, &at), "text {text:?}");
        }
    }

    #[test]
    fn word_boundaries_do_not_apply_to_cjk() {
        let (_, at) = fixture(&[("Q1", "capital")], &[("北京", "Q1", 1)]);
        let mentions = extract_mentions("我爱北京天安门", &at);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].surface, "北京");
    }

    #[test]
    fn casing_and_nfkc_variants_link_identically() {
        let (kg, at) = fixture(&[("Qcar", "car")], &[("jaguar", "Qcar", 1)]);
        let item = |text: &str| Item {
            item_id: "i1".to_string(),
            domain: "d".to_string(),
            text: text.to_string(),
            explicit_entities: Vec::new(),
        };
        let a = link_item(&item("JAGUAR"), &at, &kg).unwrap();
        let b = link_item(&item("jaguar"), &at, &kg).unwrap();
        let c = link_item(&item("Ｊａｇｕａｒ"), &at, &kg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.entities.iter().collect::<Vec<_>>(), vec!["Qcar"]);
    }

    #[test]
    fn linking_unions_text_and_explicit_entities() {
        let (kg, at) = fixture(
            &[("Qcar", "car"), ("Qanimal", "animal"), ("brandx", "brand x")],
            &[("jaguar", "Qcar", 3), ("jaguar", "Qanimal", 1)],
        );
        // text link only
        let linked = link_item(
            &Item {
                item_id: "i1".into(),
                domain: "d".into(),
                text: "jaguar".into(),
                explicit_entities: vec![],
            },
            &at,
            &kg,
        )
        .unwrap();
        assert_eq!(linked.entities.iter().collect::<Vec<_>>(), vec!["Qcar"]);

        // empty text, explicit only
        let linked = link_item(
            &Item {
                item_id: "i2".into(),
                domain: "d".into(),
                text: String::new(),
                explicit_entities: vec!["brandx".into()],
            },
            &at,
            &kg,
        )
        .unwrap();
        assert_eq!(linked.entities.iter().collect::<Vec<_>>(), vec!["brandx"]);

        // set semantics: text hit and explicit duplicate collapse
        let linked = link_item(
            &Item {
                item_id: "i3".into(),
                domain: "d".into(),
                text: "jaguar".into(),
                explicit_entities: vec!["Qcar".into()],
            },
            &at,
            &kg,
        )
        .unwrap();
        assert_eq!(linked.entities.len(), 1);
    }

    #[test]
    fn unknown_explicit_entity_is_an_error_naming_the_item() {
        let (kg, at) = fixture(&[("Q1", "x")], &[]);
        let err = link_item(
            &Item {
                item_id: "item-9".into(),
                domain: "d".into(),
                text: String::new(),
                explicit_entities: vec!["missing".into()],
            },
            &at,
            &kg,
        )
        .unwrap_err();
        match err {
            LinkError::UnknownExplicitEntity { item_id, entity_id } => {
                assert_eq!(item_id, "item-9");
                assert_eq!(entity_id, "missing");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn linked_items_round_trip_through_the_file_format() {
        let items = vec![
            LinkedItem {
                item_id: "i1".into(),
                entities: ["Qb", "Qa"].iter().map(|s| s.to_string()).collect(),
            },
            LinkedItem { item_id: "i2".into(), entities: BTreeSet::new() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("linked.tsv");
        write_linked_items(&path, &items).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "i1\tQa\tQb\ni2\n");
        assert_eq!(read_linked_items(&path).unwrap(), items);
    }
}
