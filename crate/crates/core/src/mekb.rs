//! Per-user interest aggregation.
//!
//! A user's MeKB is the weighted set of entities linked from their
//! positive interactions. Raw co-occurrence counts are log-smoothed above
//! a threshold, multiplied by the entity's base weight, re-weighted by an
//! inverse-document-frequency over the user population, and normalized so
//! each user's scores sum to one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::kgstore::KnowledgeGraph;
use crate::linker::LinkedItem;

/// Aggregation knobs. `k_star` is the count threshold above which
/// frequencies are log-smoothed; `apply_base_weight` multiplies each
/// entity's tf by its knowledge-graph base weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeKbConfig {
    pub k_star: u64,
    pub apply_base_weight: bool,
}

impl Default for MeKbConfig {
    fn default() -> Self {
        MeKbConfig { k_star: 10, apply_base_weight: true }
    }
}

/// Log smoothing of an interaction count: identity up to `k_star`, then
/// `k * (1 + ln(k / k_star))`. Continuous at the threshold and strictly
/// increasing everywhere.
pub fn smooth(k: u64, k_star: u64) -> f64 {
    debug_assert!(k_star >= 1, "k_star must be positive");
    if k <= k_star {
        k as f64
    } else {
        let kf = k as f64;
        kf * (1.0 + (kf / k_star as f64).ln())
    }
}

/// Inverse document frequency over users: `idf(e) = ln(N_u / n_e)` where
/// `n_e` counts users with an interest in `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    idf: BTreeMap<String, f64>,
    pub n_users: usize,
}

impl IdfTable {
    pub fn idf(&self, entity_id: &str) -> Option<f64> {
        self.idf.get(entity_id).copied()
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.idf.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Computes IDF from per-user interest sets. Users with empty sets still
/// count toward the population size.
pub fn compute_idf(incidence: &BTreeMap<String, BTreeSet<String>>) -> IdfTable {
    assert!(!incidence.is_empty(), "idf needs at least one user");
    let n_users = incidence.len();
    let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for entities in incidence.values() {
        for e in entities {
            *user_counts.entry(e).or_insert(0) += 1;
        }
    }
    let idf = user_counts
        .into_iter()
        .map(|(e, n)| (e.to_string(), (n_users as f64 / n as f64).ln()))
        .collect();
    IdfTable { idf, n_users }
}

/// One entity of a user's MeKB with its aggregation intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestEntry {
    pub entity_id: String,
    pub raw_count: u64,
    pub tf: f64,
    pub idf: f64,
    pub score: f64,
}

/// A user's weighted interest profile, sorted by descending score (ties
/// by ascending entity id).
#[derive(Debug, Clone, PartialEq)]
pub struct MeKb {
    pub user_id: String,
    pub entries: Vec<InterestEntry>,
}

impl MeKb {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Aggregates a user's positive interactions into a MeKB.
///
/// `raw_count(e)` is the number of positives whose linked set contains
/// `e`; `tf = smooth(raw_count) * base_weight`; the final score is
/// `tf * idf` normalized over the user's entries. Entities with zero idf
/// (interests every user shares) are dropped. A user with no positives or
/// an all-zero denominator gets an empty MeKB; such users are excluded
/// from training downstream.
pub fn build_mekb(
    user_id: &str,
    positives: &[LinkedItem],
    idf: &IdfTable,
    kg: &KnowledgeGraph,
    cfg: &MeKbConfig,
) -> MeKb {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for item in positives {
        for e in &item.entities {
            *counts.entry(e).or_insert(0) += 1;
        }
    }

    let mut entries = Vec::new();
    let mut denom = 0.0;
    for (entity_id, raw_count) in counts {
        let Some(idf_e) = idf.idf(entity_id) else { continue };
        if idf_e == 0.0 {
            continue;
        }
        let weight = if cfg.apply_base_weight {
            kg.base_weight(entity_id).unwrap_or(1.0)
        } else {
            1.0
        };
        let tf = smooth(raw_count, cfg.k_star) * weight;
        denom += tf * idf_e;
        entries.push(InterestEntry {
            entity_id: entity_id.to_string(),
            raw_count,
            tf,
            idf: idf_e,
            score: 0.0,
        });
    }

    if denom <= 0.0 {
        return MeKb { user_id: user_id.to_string(), entries: Vec::new() };
    }
    for entry in &mut entries {
        entry.score = entry.tf * entry.idf / denom;
    }
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    MeKb { user_id: user_id.to_string(), entries }
}

#[derive(Debug, Error)]
pub enum MeKbIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Writes one line per user: `user_id<TAB>entity:count:score...` in score
/// order, scores with 9 decimal places for reproducible diffs.
pub fn write_mekbs(path: &Path, mekbs: &[MeKb]) -> Result<(), MeKbIoError> {
    let io_err = |e| MeKbIoError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let io_err = |e| MeKbIoError::Io { path: path.display().to_string(), source: e };
    for mekb in mekbs {
        write!(w, "{}", mekb.user_id).map_err(io_err)?;
        for entry in &mekb.entries {
            write!(w, "\t{}:{}:{:.9}", entry.entity_id, entry.raw_count, entry.score).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a file written by [`write_mekbs`]. The stored format keeps
/// (entity, raw count, score) only; `tf` and `idf` load as zero.
pub fn read_mekbs(path: &Path) -> Result<Vec<MeKb>, MeKbIoError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| MeKbIoError::Io { path: name.clone(), source: e })?;
    let mut mekbs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| MeKbIoError::Io { path: name.clone(), source: e })?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user_id = fields.next().unwrap_or_default();
        if user_id.is_empty() {
            return Err(MeKbIoError::Parse {
                path: name.clone(),
                line: lineno,
                msg: "missing user id".to_string(),
            });
        }
        let mut entries = Vec::new();
        for field in fields {
            // entity ids may contain ':'; count and score never do
            let mut parts = field.rsplitn(3, ':');
            let (score, count, entity) = (parts.next(), parts.next(), parts.next());
            let (Some(score), Some(count), Some(entity)) = (score, count, entity) else {
                return Err(MeKbIoError::Parse {
                    path: name.clone(),
                    line: lineno,
                    msg: format!("bad entry {field:?}"),
                });
            };
            let raw_count: u64 = count.parse().map_err(|_| MeKbIoError::Parse {
                path: name.clone(),
                line: lineno,
                msg: format!("bad count in {field:?}"),
            })?;
            let score: f64 = score.parse().map_err(|_| MeKbIoError::Parse {
                path: name.clone(),
                line: lineno,
                msg: format!("bad score in {field:?}"),
            })?;
            entries.push(InterestEntry {
                entity_id: entity.to_string(),
                raw_count,
                tf: 0.0,
                idf: 0.0,
                score,
            });
        }
        mekbs.push(MeKb { user_id: user_id.to_string(), entries });
    }
    Ok(mekbs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn linked(entities: &[&str]) -> LinkedItem {
        LinkedItem {
            item_id: "i".to_string(),
            entities: entities.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn incidence(spec: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        spec.iter()
            .map(|(u, es)| (u.to_string(), es.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn smooth_is_identity_below_threshold() {
        assert_eq!(smooth(5, 10), 5.0);
        assert_eq!(smooth(0, 10), 0.0);
    }

    #[test]
    fn smooth_is_continuous_at_the_threshold() {
        assert_eq!(smooth(10, 10), 10.0);
    }

    #[test]
    fn smooth_above_threshold_matches_direct_evaluation() {
        // independent calculator: 27 * (1 + ln 2.7)
        let expected = 53.817_797_871_277_655;
        assert!((smooth(27, 10) - expected).abs() < 1e-12);
    }

    #[test]
    fn idf_matches_direct_evaluation() {
        let table = compute_idf(&incidence(&[
            ("u1", &["rare", "shared", "pair"]),
            ("u2", &["shared", "pair"]),
            ("u3", &["shared"]),
            ("u4", &["shared"]),
        ]));
        assert_eq!(table.n_users, 4);
        assert!((table.idf("rare").unwrap() - 4.0f64.ln()).abs() < 1e-15);
        assert!((table.idf("pair").unwrap() - LN2).abs() < 1e-15);
        assert_eq!(table.idf("shared").unwrap(), 0.0);
        assert_eq!(table.idf("never-seen"), None);
    }

    #[test]
    fn mekb_scores_match_the_hand_oracle() {
        // counts {e1: 3, e2: 1}, idf {e1: ln 2, e2: ln 4}, weights 1.0:
        // scores = {3 ln2 / (3 ln2 + ln4), ln4 / (3 ln2 + ln4)} = {0.6, 0.4}
        let idf = compute_idf(&incidence(&[
            ("u1", &["e1", "e2"]),
            ("u2", &["e1"]),
            ("u3", &[]),
            ("u4", &[]),
        ]));
        let kg = KnowledgeGraph::new();
        let positives = vec![linked(&["e1"]), linked(&["e1"]), linked(&["e1", "e2"])];
        let mekb = build_mekb("u1", &positives, &idf, &kg, &MeKbConfig::default());
        assert_eq!(mekb.entries.len(), 2);
        assert_eq!(mekb.entries[0].entity_id, "e1");
        assert_eq!(mekb.entries[0].raw_count, 3);
        assert!((mekb.entries[0].score - 0.6).abs() < 1e-12);
        assert!((mekb.entries[1].score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_entity_scores_one() {
        let idf = compute_idf(&incidence(&[("u1", &["e1"]), ("u2", &[])]));
        let kg = KnowledgeGraph::new();
        let mekb = build_mekb("u1", &[linked(&["e1"])], &idf, &kg, &MeKbConfig::default());
        assert_eq!(mekb.entries.len(), 1);
        assert_eq!(mekb.entries[0].score, 1.0);
    }

    #[test]
    fn universally_shared_interests_yield_an_empty_mekb() {
        let idf = compute_idf(&incidence(&[("u1", &["e1"]), ("u2", &["e1"])]));
        let kg = KnowledgeGraph::new();
        let mekb = build_mekb("u1", &[linked(&["e1"])], &idf, &kg, &MeKbConfig::default());
        assert!(mekb.is_empty());
    }

    #[test]
    fn no_positives_yield_an_empty_mekb() {
        let idf = compute_idf(&incidence(&[("u1", &["e1"]), ("u2", &[])]));
        let kg = KnowledgeGraph::new();
        assert!(build_mekb("u1", &[], &idf, &kg, &MeKbConfig::default()).is_empty());
    }

    #[test]
    fn mekb_file_round_trips_order_and_counts() {
        let idf = compute_idf(&incidence(&[
            ("u1", &["e1", "e:colon"]),
            ("u2", &["e1"]),
            ("u3", &[]),
            ("u4", &[]),
        ]));
        let kg = KnowledgeGraph::new();
        let positives = vec![linked(&["e1"]), linked(&["e1", "e:colon"])];
        let mekb = build_mekb("u1", &positives, &idf, &kg, &MeKbConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mekb.tsv");
        write_mekbs(&path, &[mekb.clone()]).unwrap();
        let loaded = read_mekbs(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        let ids: Vec<&str> = loaded[0].entries.iter().map(|e| e.entity_id.as_str()).collect();
        let want: Vec<&str> = mekb.entries.iter().map(|e| e.entity_id.as_str()).collect();
        assert_eq!(ids, want);
        for (a, b) in loaded[0].entries.iter().zip(&mekb.entries) {
            assert_eq!(a.raw_count, b.raw_count);
            assert!((a.score - b.score).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Strictly increasing in k, for any threshold.
        #[test]
        fn smooth_is_strictly_increasing(k in 0u64..1000, k_star in 1u64..50) {
            prop_assert!(smooth(k + 1, k_star) > smooth(k, k_star));
        }

        /// Non-empty MeKBs have scores summing to one, sorted descending.
        #[test]
        fn scores_normalize_and_sort(
            counts in proptest::collection::vec(1u64..100, 1..8),
            shared in proptest::collection::vec(proptest::bool::ANY, 8),
        ) {
            // entity j appears for the target user `counts[j]` times; the
            // `shared` flags put an entity in a second user's set, which
            // halves its idf instead of zeroing it (population of 4).
            let mut inc = incidence(&[("u2", &[]), ("u3", &[]), ("u4", &[])]);
            let mut u1: BTreeSet<String> = BTreeSet::new();
            for (j, _) in counts.iter().enumerate() {
                u1.insert(format!("e{j}"));
                if shared[j % shared.len()] {
                    inc.get_mut("u2").unwrap().insert(format!("e{j}"));
                }
            }
            inc.insert("u1".to_string(), u1);
            let idf = compute_idf(&inc);
            let kg = KnowledgeGraph::new();
            let mut positives = Vec::new();
            for (j, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    positives.push(linked(&[format!("e{j}").as_str()]));
                }
            }
            let mekb = build_mekb("u1", &positives, &idf, &kg, &MeKbConfig::default());
            prop_assert!(!mekb.is_empty());
            let sum: f64 = mekb.entries.iter().map(|e| e.score).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for w in mekb.entries.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
                if w[0].score == w[1].score {
                    prop_assert!(w[0].entity_id < w[1].entity_id);
                }
            }
        }
    }
}
