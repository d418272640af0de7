//! Shared assembly steps behind the subcommands, with the exit-code
//! policy: 1 generic, 2 missing input, 3 load/invariant violation,
//! 4 non-finite loss during training, 5 cold user.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::anyhow;

use mekb_core::dataio::synth::files;
use mekb_core::dataio::{ingest, Interaction, RawItem};
use mekb_core::eval::{filter_dataset, split_dataset, Split};
use mekb_core::kgstore::{augment_domain_entities, load_kg, resolve_augmentation, KnowledgeGraph};
use mekb_core::linker::{Item, LinkedItem};
use mekb_core::mekb::{build_mekb, compute_idf, MeKb};
use mekb_core::tokenizer::{build_sequence, TokenSequence, Vocab};

use crate::config::PipelineConfig;

pub const EXIT_GENERIC: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_LOAD: i32 = 3;
pub const EXIT_NAN: i32 = 4;
pub const EXIT_COLD_USER: i32 = 5;

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn generic(error: anyhow::Error) -> Self {
        CliError { code: EXIT_GENERIC, error }
    }

    pub fn load(error: impl Into<anyhow::Error>) -> Self {
        CliError { code: EXIT_LOAD, error: error.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        CliError::generic(error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Input files must exist before a subcommand starts; a missing one is
/// its own exit code.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_MISSING_INPUT,
            error: anyhow!("missing input file {}", path.display()),
        })
    }
}

/// Loads the knowledge graph (triples are optional on disk) and
/// registers every item attribute as an augmentation entity.
pub fn load_graph(cfg: &PipelineConfig, items: &[RawItem]) -> CliResult<KnowledgeGraph> {
    let entities = cfg.data_file(files::ENTITIES);
    require_file(&entities)?;
    let triples = cfg.data_file(files::TRIPLES);
    let triples = triples.is_file().then_some(triples);
    let (mut kg, diag) = load_kg(&entities, triples.as_deref()).map_err(CliError::load)?;
    if diag.rejected_triples > 0 {
        eprintln!("note: rejected {} triples referencing unknown entities", diag.rejected_triples);
    }
    let attrs: Vec<_> = items.iter().flat_map(|i| i.attributes.iter().cloned()).collect();
    augment_domain_entities(&mut kg, attrs);
    Ok(kg)
}

/// Reads interactions and items, reporting ingest diagnostics to stderr.
pub fn load_dataset(cfg: &PipelineConfig) -> CliResult<(Vec<Interaction>, Vec<RawItem>)> {
    let interactions_path = cfg.data_file(files::INTERACTIONS);
    let items_path = cfg.data_file(files::ITEMS);
    require_file(&interactions_path)?;
    require_file(&items_path)?;
    let (interactions, items, diag) =
        ingest(&interactions_path, &items_path).map_err(CliError::load)?;
    let malformed = diag.malformed_interaction_lines + diag.malformed_item_lines;
    if malformed > 0 {
        eprintln!("note: skipped {malformed} malformed lines during ingestion");
    }
    Ok((interactions, items))
}

/// Resolves an item's attributes to their augmentation entity ids. The
/// graph must already be augmented with these attributes.
pub fn resolve_item(kg: &KnowledgeGraph, raw: &RawItem) -> CliResult<Item> {
    let mut explicit = Vec::with_capacity(raw.attributes.len());
    for (source, name) in &raw.attributes {
        let id = resolve_augmentation(kg, *source, name).ok_or_else(|| {
            CliError::load(anyhow!(
                "item {}: attribute {}={:?} has no registered entity",
                raw.item_id,
                source.label(),
                name
            ))
        })?;
        explicit.push(id);
    }
    Ok(Item {
        item_id: raw.item_id.clone(),
        domain: raw.domain.clone(),
        text: raw.text.clone(),
        explicit_entities: explicit,
    })
}

/// Per-domain frequency filtering, then the seeded split of the target
/// domain with the overlapped-user holdout.
pub struct PreparedData {
    pub source_records: Vec<Interaction>,
    pub target_records: Vec<Interaction>,
    pub overlapped_users: BTreeSet<String>,
    pub split: Split,
}

pub fn prepare_split(cfg: &PipelineConfig, interactions: &[Interaction]) -> PreparedData {
    let domain_records = |domain: &str| -> Vec<Interaction> {
        let records: Vec<Interaction> =
            interactions.iter().filter(|r| r.domain == domain).cloned().collect();
        filter_dataset(&records, cfg.filter.min_user_positives, cfg.filter.min_item_positives)
    };
    let source_records = domain_records(&cfg.domains.source);
    let target_records = domain_records(&cfg.domains.target);
    let source_users: BTreeSet<String> =
        source_records.iter().map(|r| r.user_id.clone()).collect();
    let target_users: BTreeSet<String> =
        target_records.iter().map(|r| r.user_id.clone()).collect();
    let overlapped_users: BTreeSet<String> =
        source_users.intersection(&target_users).cloned().collect();
    let split = split_dataset(&target_records, &overlapped_users, &cfg.split_spec());
    PreparedData { source_records, target_records, overlapped_users, split }
}

/// Builds every user's MeKB from their source-domain positives (plus
/// target train-split positives when configured), against an IDF over
/// the same population.
pub fn build_all_mekbs(
    cfg: &PipelineConfig,
    kg: &KnowledgeGraph,
    linked: &BTreeMap<String, LinkedItem>,
    prepared: &PreparedData,
) -> Vec<MeKb> {
    let mut positives: BTreeMap<String, Vec<LinkedItem>> = BTreeMap::new();
    let mut add = |records: &[Interaction]| {
        for r in records {
            if let Some(li) = linked.get(&r.item_id) {
                positives.entry(r.user_id.clone()).or_default().push(li.clone());
            }
        }
    };
    add(&prepared.source_records);
    if cfg.mekb.include_target_train {
        add(&prepared.split.train);
    }

    let incidence: BTreeMap<String, BTreeSet<String>> = positives
        .iter()
        .map(|(u, items)| {
            (u.clone(), items.iter().flat_map(|i| i.entities.iter().cloned()).collect())
        })
        .collect();
    if incidence.is_empty() {
        return Vec::new();
    }
    let idf = compute_idf(&incidence);
    let mekb_cfg = cfg.mekb_config();
    positives
        .iter()
        .map(|(u, items)| build_mekb(u, items, &idf, kg, &mekb_cfg))
        .collect()
}

/// Serializes each MeKB into its encoder input sequence.
pub fn sequences_for(
    mekbs: &[MeKb],
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    n_max: usize,
) -> BTreeMap<String, TokenSequence> {
    mekbs
        .iter()
        .map(|m| (m.user_id.clone(), build_sequence(m, kg, vocab, n_max)))
        .collect()
}

/// Sorted target-domain item catalog (the item tower's row space).
pub fn target_catalog(cfg: &PipelineConfig, items: &[RawItem]) -> Vec<String> {
    let mut ids: Vec<String> = items
        .iter()
        .filter(|i| i.domain == cfg.domains.target)
        .map(|i| i.item_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Loads a work artifact produced by an earlier subcommand.
pub fn require_artifact(cfg: &PipelineConfig, name: &str) -> CliResult<std::path::PathBuf> {
    let path = cfg.work_file(name);
    require_file(&path)?;
    Ok(path)
}
