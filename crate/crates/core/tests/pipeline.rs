//! End-to-end library flow on synthetic data: generate → load → link →
//! aggregate → serialize → train → evaluate, with the load-time
//! invariants checked along the way.

use std::collections::{BTreeMap, BTreeSet};

use mekb_core::alias::build_alias_table_from_file;
use mekb_core::dataio::synth::{files, generate_synthetic, SynthSpec};
use mekb_core::dataio::{ingest, Interaction};
use mekb_core::encoder::{EncoderConfig, ItemTower, UserEncoderParams};
use mekb_core::eval::{evaluate, RankRecord, Scorer, Split, SplitSpec};
use mekb_core::kgstore::{augment_domain_entities, load_kg, KnowledgeGraph};
use mekb_core::linker::{link_item, Item, LinkedItem};
use mekb_core::mekb::{build_mekb, compute_idf, MeKb, MeKbConfig};
use mekb_core::tokenizer::{build_sequence, train_vocab, Vocab};
use mekb_core::training::{train_dual_encoder, TrainConfig, TrainingExample};

#[test]
fn synthetic_kg_files_load_with_exact_counts() {
    let spec = SynthSpec {
        n_users: 5,
        n_source_items: 12,
        n_target_items: 10,
        n_topics: 10,
        n_entities: 10_000,
        ..SynthSpec::default()
    };
    let bundle = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write_to_dir(dir.path()).unwrap();
    let (kg, diag) = load_kg(
        &dir.path().join(files::ENTITIES),
        Some(&dir.path().join(files::TRIPLES)),
    )
    .unwrap();
    assert_eq!(kg.len(), 10_000);
    assert_eq!(kg.triples().len(), 20_000);
    assert_eq!(diag.rejected_triples, 0);
}

/// Shared assembly used by the tests below: bundle on disk → linked
/// items, MeKBs, vocabulary and sequences.
struct Assembled {
    kg: KnowledgeGraph,
    linked: BTreeMap<String, LinkedItem>,
    mekbs: BTreeMap<String, MeKb>,
    vocab: Vocab,
    interactions: Vec<Interaction>,
}

fn assemble(dir: &std::path::Path) -> Assembled {
    let (kg, kg_diag) = load_kg(&dir.join(files::ENTITIES), Some(&dir.join(files::TRIPLES))).unwrap();
    assert_eq!(kg_diag.rejected_triples, 0, "bundle must load cleanly");
    let (interactions, items, _) =
        ingest(&dir.join(files::INTERACTIONS), &dir.join(files::ITEMS)).unwrap();

    let mut kg = kg;
    let attrs = items
        .iter()
        .flat_map(|i| i.attributes.iter().cloned())
        .collect::<Vec<_>>();
    augment_domain_entities(&mut kg, attrs);

    let at = build_alias_table_from_file(&dir.join(files::ANCHORS), &kg).unwrap();
    assert_eq!(at.diagnostics.skipped_unknown_entity, 0, "anchors must all resolve");
    assert_eq!(at.diagnostics.skipped_empty_surface, 0);

    let mut linked = BTreeMap::new();
    for raw in &items {
        let item = Item {
            item_id: raw.item_id.clone(),
            domain: raw.domain.clone(),
            text: raw.text.clone(),
            explicit_entities: raw
                .attributes
                .iter()
                .map(|(source, name)| {
                    mekb_core::kgstore::resolve_augmentation(&kg, *source, name)
                        .expect("attribute was registered during augmentation")
                })
                .collect(),
        };
        let li = link_item(&item, &at, &kg).unwrap();
        for e in &li.entities {
            assert!(kg.contains(e), "linked entity {e} missing from KG");
        }
        linked.insert(li.item_id.clone(), li);
    }

    // source-domain incidence and MeKBs
    let mut positives: BTreeMap<String, Vec<LinkedItem>> = BTreeMap::new();
    for r in interactions.iter().filter(|r| r.domain == "source") {
        if let Some(li) = linked.get(&r.item_id) {
            positives.entry(r.user_id.clone()).or_default().push(li.clone());
        }
    }
    let incidence: BTreeMap<String, BTreeSet<String>> = positives
        .iter()
        .map(|(u, items)| {
            (u.clone(), items.iter().flat_map(|i| i.entities.iter().cloned()).collect())
        })
        .collect();
    let idf = compute_idf(&incidence);
    let cfg = MeKbConfig::default();
    let mekbs: BTreeMap<String, MeKb> = positives
        .iter()
        .map(|(u, items)| (u.clone(), build_mekb(u, items, &idf, &kg, &cfg)))
        .collect();

    let titles: Vec<String> = kg.entities().map(|e| e.title.clone()).collect();
    let vocab = train_vocab(&titles, 400).unwrap();

    Assembled { kg, linked, mekbs, vocab, interactions }
}

struct PrecomputedScorer {
    user_vecs: BTreeMap<String, Vec<f64>>,
    tower: ItemTower,
}

impl Scorer for PrecomputedScorer {
    fn scores(&self, user_id: &str, candidates: &[usize]) -> Option<Vec<f64>> {
        let u = self.user_vecs.get(user_id)?;
        Some(candidates.iter().map(|&i| mekb_core::encoder::score(u, self.tower.embedding(i))).collect())
    }
}

#[test]
fn planted_structure_is_learnable_end_to_end() {
    let spec = SynthSpec::separable(13);
    let bundle = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write_to_dir(dir.path()).unwrap();
    let assembled = assemble(dir.path());

    // every user's MeKB is non-empty on the separable instance
    for (user, mekb) in &assembled.mekbs {
        assert!(!mekb.is_empty(), "user {user} has an empty MeKB");
    }

    let enc_cfg = EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 32,
        d_ffn: 64,
        k_dim: 16,
        n_max: 32,
        vocab_size: assembled.vocab.len(),
        seed: 5,
    };
    let sequences: BTreeMap<String, _> = assembled
        .mekbs
        .iter()
        .map(|(u, m)| (u.clone(), build_sequence(m, &assembled.kg, &assembled.vocab, enc_cfg.n_max)))
        .collect();

    let target_ids: Vec<String> = assembled
        .linked
        .keys()
        .filter(|id| id.starts_with('T'))
        .cloned()
        .collect();
    let tower = ItemTower::init(target_ids, enc_cfg.k_dim, 21);

    let examples: Vec<TrainingExample> = assembled
        .interactions
        .iter()
        .filter(|r| r.domain == "target")
        .map(|r| TrainingExample {
            user_id: r.user_id.clone(),
            seq: sequences[&r.user_id].clone(),
            positive: r.item_id.clone(),
        })
        .collect();
    assert_eq!(examples.len(), 20);

    let train_cfg = TrainConfig {
        epochs: 80,
        batch_size: 5,
        lr: 2e-2,
        weight_decay: 0.0,
        warmup_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let outcome = train_dual_encoder(
        &examples,
        UserEncoderParams::init(&enc_cfg),
        tower,
        &enc_cfg,
        &train_cfg,
    )
    .unwrap();
    let first = outcome.epoch_losses[0];
    let last = *outcome.epoch_losses.last().unwrap();
    assert!(last < 0.5 * first, "training did not converge: {first} -> {last}");

    // training-set ranking: the planted assignment should be mostly recovered
    let user_vecs: BTreeMap<String, Vec<f64>> = sequences
        .iter()
        .map(|(u, s)| (u.clone(), outcome.params.encode(&enc_cfg, s).unwrap()))
        .collect();
    let scorer = PrecomputedScorer { user_vecs, tower: outcome.tower.clone() };
    let records: Vec<RankRecord> = examples
        .iter()
        .map(|ex| RankRecord {
            user_id: ex.user_id.clone(),
            positive_idx: outcome.tower.index_of(&ex.positive).unwrap(),
        })
        .collect();
    // rank against the full catalog (n_neg = I - 1, single-interaction users)
    let report = evaluate(&scorer, &records, &BTreeMap::new(), outcome.tower.len(), 1, 9, 1).unwrap();
    assert!(
        report.overall.hr_at_k > 0.5,
        "training HR@1 too low: {}",
        report.overall.hr_at_k
    );
}

#[test]
fn split_feeds_training_without_leaking_cold_users() {
    let spec = SynthSpec { n_users: 60, seed: 11, ..SynthSpec::default() };
    let bundle = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write_to_dir(dir.path()).unwrap();
    let (interactions, _, _) =
        ingest(&dir.path().join(files::INTERACTIONS), &dir.path().join(files::ITEMS)).unwrap();

    let source_users: BTreeSet<String> = interactions
        .iter()
        .filter(|r| r.domain == "source")
        .map(|r| r.user_id.clone())
        .collect();
    let target_records: Vec<Interaction> =
        interactions.iter().filter(|r| r.domain == "target").cloned().collect();
    let target_users: BTreeSet<String> =
        target_records.iter().map(|r| r.user_id.clone()).collect();
    let overlapped: BTreeSet<String> =
        source_users.intersection(&target_users).cloned().collect();
    assert!(!overlapped.is_empty());

    let Split { train, valid, test, cold_start_users } =
        mekb_core::eval::split_dataset(&target_records, &overlapped, &SplitSpec {
            seed: 4,
            ..SplitSpec::default()
        });
    assert_eq!(train.len() + valid.len() + test.len(), target_records.len());
    for user in &cold_start_users {
        assert!(train.iter().all(|r| &r.user_id != user));
        assert!(valid.iter().all(|r| &r.user_id != user));
    }
    // zero-shot bin is exactly the users with no train records
    let train_users: BTreeSet<&String> = train.iter().map(|r| &r.user_id).collect();
    for user in &cold_start_users {
        assert!(!train_users.contains(user));
    }
}
