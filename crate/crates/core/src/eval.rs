//! Dataset splitting and ranking evaluation.
//!
//! Test records are scored against 1 positive + `n_neg` sampled
//! negatives (uniform over target items the user never interacted with).
//! The positive's rank uses the pessimistic tie rule: equal-scored
//! negatives beat it. HR@K is a hit indicator, NDCG@K is
//! `1 / log2(rank + 1)`. Records bin by the user's target-domain
//! training count: `[0]`, `[1,10)`, `[10,+inf)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Interaction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the test set is empty")]
    EmptyTestSet,
    #[error("the reference user set is empty")]
    EmptyUserSet,
}

/// Split fractions, the overlapped-user holdout fraction, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub cold_start_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            cold_start_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), String> {
        let sum = self.train_fraction + self.valid_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("split fractions sum to {sum}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err("cold_start_fraction must be in [0, 1]".to_string());
        }
        Ok(())
    }
}

/// An exact partition of the input records. Cold-start users (a seeded
/// sample of the overlapped users) have all their records in `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub cold_start_users: BTreeSet<String>,
}

/// Seeded 8:1:1-style record split with the overlapped-user holdout:
/// a `cold_start_fraction` sample of `overlapped_users` moves entirely
/// into test; remaining records split by the configured fractions.
pub fn split_dataset(
    interactions: &[Interaction],
    overlapped_users: &BTreeSet<String>,
    spec: &SplitSpec,
) -> Split {
    spec.validate().expect("invalid split spec");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut overlapped: Vec<&String> = overlapped_users.iter().collect();
    overlapped.shuffle(&mut rng);
    let n_cold = (overlapped.len() as f64 * spec.cold_start_fraction).round() as usize;
    let cold_start_users: BTreeSet<String> =
        overlapped.into_iter().take(n_cold).cloned().collect();

    let mut test: Vec<Interaction> = Vec::new();
    let mut pool: Vec<Interaction> = Vec::new();
    for record in interactions {
        if cold_start_users.contains(&record.user_id) {
            test.push(record.clone());
        } else {
            pool.push(record.clone());
        }
    }

    pool.shuffle(&mut rng);
    let m = pool.len();
    let n_train = (m as f64 * spec.train_fraction).floor() as usize;
    let n_valid = (m as f64 * spec.valid_fraction).floor() as usize;
    let mut pool = pool.into_iter();
    let train: Vec<Interaction> = pool.by_ref().take(n_train).collect();
    let valid: Vec<Interaction> = pool.by_ref().take(n_valid).collect();
    test.extend(pool);

    Split { train, valid, test, cold_start_users }
}

/// Anything that scores candidate items for a user. Returns `None` when
/// the user cannot be scored (for the model scorer: an empty MeKB).
pub trait Scorer {
    fn scores(&self, user_id: &str, candidates: &[usize]) -> Option<Vec<f64>>;
}

/// One test record prepared for ranking: the positive item is an index
/// into the shared target catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRecord {
    pub user_id: String,
    pub positive_idx: usize,
}

/// Tallies from a ranking pass.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RankDiagnostics {
    /// Records whose user the scorer could not encode.
    pub skipped_unscorable: usize,
    /// Records whose negative pool was smaller than `n_neg` and fell
    /// back to sampling with replacement.
    pub with_replacement_fallbacks: usize,
    /// Records with no negatives at all (the user interacted with the
    /// whole catalog).
    pub empty_pools: usize,
}

/// Ranks every record's positive among `n_neg` sampled negatives.
///
/// Negatives are drawn uniformly without replacement from catalog items
/// the user never interacted with (`interacted` must hold the user's
/// full target-domain item set across all splits); a pool smaller than
/// `n_neg` falls back to sampling with replacement. Each record gets an
/// RNG stream derived from `(seed, record index)`, so results do not
/// depend on evaluation order. Returns `None` for unscorable records.
pub fn rank_records(
    scorer: &dyn Scorer,
    records: &[RankRecord],
    interacted: &BTreeMap<String, BTreeSet<usize>>,
    n_items: usize,
    n_neg: usize,
    seed: u64,
) -> (Vec<Option<usize>>, RankDiagnostics) {
    let mut diag = RankDiagnostics::default();
    let mut ranks = Vec::with_capacity(records.len());
    let empty = BTreeSet::new();
    for (idx, record) in records.iter().enumerate() {
        let seen = interacted.get(&record.user_id).unwrap_or(&empty);
        let pool: Vec<usize> = (0..n_items)
            .filter(|j| *j != record.positive_idx && !seen.contains(j))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let negatives: Vec<usize> = if pool.is_empty() {
            diag.empty_pools += 1;
            Vec::new()
        } else if pool.len() >= n_neg {
            rand::seq::index::sample(&mut rng, pool.len(), n_neg)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            diag.with_replacement_fallbacks += 1;
            (0..n_neg).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };

        let mut candidates = Vec::with_capacity(1 + negatives.len());
        candidates.push(record.positive_idx);
        candidates.extend(&negatives);
        let Some(scores) = scorer.scores(&record.user_id, &candidates) else {
            diag.skipped_unscorable += 1;
            ranks.push(None);
            continue;
        };
        debug_assert_eq!(scores.len(), candidates.len());
        let positive_score = scores[0];
        // pessimistic ties: equal-scored negatives rank ahead
        let rank = 1 + scores[1..].iter().filter(|&&s| s >= positive_score).count();
        ranks.push(Some(rank));
    }
    (ranks, diag)
}

/// HR@K and NDCG@K of a single 1-based rank.
pub fn hr_ndcg_at(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Mean metrics over a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BinReport {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub n_users: usize,
    pub n_records: usize,
}

/// Evaluation output: overall metrics plus, when activity counts were
/// supplied, one row per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub overall: BinReport,
    pub bins: Vec<(String, BinReport)>,
    pub diagnostics: RankDiagnostics,
}

pub const BIN_LABELS: [&str; 3] = ["[0]", "[1,10)", "[10,+inf)"];

/// Bin index by target-domain training count: `[0]`, `[1,10)`, `[10,+inf)`.
pub fn activity_bin(train_count: usize) -> usize {
    match train_count {
        0 => 0,
        1..=9 => 1,
        _ => 2,
    }
}

fn aggregate<'a>(
    entries: impl Iterator<Item = (&'a str, usize)>,
    k: usize,
) -> BinReport {
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut users: BTreeSet<&str> = BTreeSet::new();
    let mut n_records = 0usize;
    for (user, rank) in entries {
        let (hr, ndcg) = hr_ndcg_at(rank, k);
        hr_sum += hr;
        ndcg_sum += ndcg;
        users.insert(user);
        n_records += 1;
    }
    if n_records == 0 {
        return BinReport::default();
    }
    BinReport {
        hr_at_k: hr_sum / n_records as f64,
        ndcg_at_k: ndcg_sum / n_records as f64,
        n_users: users.len(),
        n_records,
    }
}

/// Overall sampled-negative evaluation (no activity bins).
pub fn evaluate(
    scorer: &dyn Scorer,
    records: &[RankRecord],
    interacted: &BTreeMap<String, BTreeSet<usize>>,
    n_items: usize,
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let (ranks, diagnostics) = rank_records(scorer, records, interacted, n_items, n_neg, seed);
    let overall = aggregate(
        records
            .iter()
            .zip(&ranks)
            .filter_map(|(r, rank)| rank.map(|rk| (r.user_id.as_str(), rk))),
        k,
    );
    Ok(EvalReport { k, overall, bins: Vec::new(), diagnostics })
}

/// Assigns already-ranked records to activity bins and aggregates
/// per-bin metrics. `train_counts` maps users to their target-domain
/// training record count (absent users count as zero).
pub fn bin_by_activity(
    records: &[RankRecord],
    ranks: &[Option<usize>],
    train_counts: &BTreeMap<String, usize>,
    k: usize,
    diagnostics: RankDiagnostics,
) -> EvalReport {
    assert_eq!(records.len(), ranks.len());
    let scored = || {
        records
            .iter()
            .zip(ranks)
            .filter_map(|(r, rank)| rank.map(|rk| (r, rk)))
    };
    let overall = aggregate(scored().map(|(r, rk)| (r.user_id.as_str(), rk)), k);
    let bins = BIN_LABELS
        .iter()
        .enumerate()
        .map(|(b, label)| {
            let report = aggregate(
                scored().filter_map(|(r, rk)| {
                    let count = train_counts.get(&r.user_id).copied().unwrap_or(0);
                    (activity_bin(count) == b).then_some((r.user_id.as_str(), rk))
                }),
                k,
            );
            (label.to_string(), report)
        })
        .collect();
    EvalReport { k, overall, bins, diagnostics }
}

/// Sampled-negative evaluation with the frequency-binned breakdown.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_binned(
    scorer: &dyn Scorer,
    records: &[RankRecord],
    interacted: &BTreeMap<String, BTreeSet<usize>>,
    train_counts: &BTreeMap<String, usize>,
    n_items: usize,
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let (ranks, diagnostics) = rank_records(scorer, records, interacted, n_items, n_neg, seed);
    Ok(bin_by_activity(records, &ranks, train_counts, k, diagnostics))
}

impl EvalReport {
    /// Human-readable table mirroring the frequency-binned layout.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>8} {:>9}\n",
            "bin",
            format!("HR@{}", self.k),
            format!("NDCG@{}", self.k),
            "users",
            "records"
        ));
        for (label, bin) in &self.bins {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>8} {:>9}\n",
                label, bin.hr_at_k, bin.ndcg_at_k, bin.n_users, bin.n_records
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>8} {:>9}\n",
            "all", self.overall.hr_at_k, self.overall.ndcg_at_k, self.overall.n_users,
            self.overall.n_records
        ));
        if self.diagnostics.skipped_unscorable > 0 {
            out.push_str(&format!(
                "skipped {} records with empty MeKB\n",
                self.diagnostics.skipped_unscorable
            ));
        }
        out
    }

    /// Machine-readable lines: `bin<TAB>hr<TAB>ndcg<TAB>users<TAB>records`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (label, bin) in &self.bins {
            out.push_str(&format!(
                "{label}\t{:.6}\t{:.6}\t{}\t{}\n",
                bin.hr_at_k, bin.ndcg_at_k, bin.n_users, bin.n_records
            ));
        }
        out.push_str(&format!(
            "all\t{:.6}\t{:.6}\t{}\t{}\n",
            self.overall.hr_at_k, self.overall.ndcg_at_k, self.overall.n_users,
            self.overall.n_records
        ));
        out
    }
}

/// Fraction of `x`'s users also present in `y`.
pub fn overlap_ratio(
    users_x: &BTreeSet<String>,
    users_y: &BTreeSet<String>,
) -> Result<f64, EvalError> {
    if users_x.is_empty() {
        return Err(EvalError::EmptyUserSet);
    }
    let common = users_x.intersection(users_y).count();
    Ok(common as f64 / users_x.len() as f64)
}

/// Single-pass frequency filter: drops users with fewer than
/// `min_user_positives` records and items with fewer than
/// `min_item_positives`, both measured on the input (no re-filtering).
pub fn filter_dataset(
    interactions: &[Interaction],
    min_user_positives: usize,
    min_item_positives: usize,
) -> Vec<Interaction> {
    let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut item_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in interactions {
        *user_counts.entry(&r.user_id).or_insert(0) += 1;
        *item_counts.entry(&r.item_id).or_insert(0) += 1;
    }
    interactions
        .iter()
        .filter(|r| {
            user_counts[r.user_id.as_str()] >= min_user_positives
                && item_counts[r.item_id.as_str()] >= min_item_positives
        })
        .cloned()
        .collect()
}
