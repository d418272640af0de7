//! Subcommand implementations. Each reads its declared inputs, writes
//! its declared artifacts, and prints a short summary to stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context};

use mekb_core::alias::{build_alias_table_from_file, AliasTable};
use mekb_core::dataio::synth::{files, generate_synthetic, SynthSpec};
use mekb_core::dataio::Interaction;
use mekb_core::encoder::checkpoint::{load_checkpoint, save_checkpoint};
use mekb_core::encoder::{score, ItemTower, UserEncoderParams};
use mekb_core::eval::{evaluate_binned, EvalReport, RankRecord, Scorer};
use mekb_core::kgstore::load_kg;
use mekb_core::linker::{link_item, read_linked_items, write_linked_items, LinkedItem};
use mekb_core::mekb::{read_mekbs, write_mekbs, InterestEntry, MeKb};
use mekb_core::tokenizer::{build_sequence, train_vocab, TokenSequence, Vocab};
use mekb_core::training::{
    lr_at, pretrain_mlm, train_dual_encoder, TrainError, TrainingExample,
};

use crate::config::{artifacts, PipelineConfig};
use crate::pipeline::{
    build_all_mekbs, load_dataset, load_graph, prepare_split, require_artifact, require_file,
    resolve_item, sequences_for, target_catalog, CliError, CliResult, PreparedData, EXIT_COLD_USER,
    EXIT_NAN,
};

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub users: Option<usize>,
    pub topics: Option<usize>,
    pub entities: Option<usize>,
    pub source_items: Option<usize>,
    pub target_items: Option<usize>,
    pub separable: bool,
}

/// `synth`: writes a seeded synthetic dataset plus a matching config.
pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = if args.separable {
        SynthSpec::separable(args.seed)
    } else {
        SynthSpec { seed: args.seed, ..SynthSpec::default() }
    };
    if let Some(n) = args.users {
        spec.n_users = n;
    }
    if let Some(n) = args.topics {
        spec.n_topics = n;
    }
    if let Some(n) = args.entities {
        spec.n_entities = n;
    }
    if let Some(n) = args.source_items {
        spec.n_source_items = n;
    }
    if let Some(n) = args.target_items {
        spec.n_target_items = n;
    }

    let bundle = generate_synthetic(&spec).map_err(CliError::load)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    bundle.write_to_dir(&args.out).map_err(CliError::load)?;

    // paths are relative to the config file, keeping the bundle portable
    let cfg = PipelineConfig::synth_preset(PathBuf::from("."), PathBuf::from("work"), args.seed);
    cfg.save(&args.out.join("config.toml"))?;
    println!(
        "wrote synthetic dataset: {} users, {} items, {} rating records -> {}",
        spec.n_users,
        spec.n_source_items + spec.n_target_items,
        bundle.rating_records.len(),
        args.out.display()
    );
    Ok(())
}

/// `build-alias`: anchors + entities -> alias.tsv.
pub fn build_alias(cfg: &PipelineConfig) -> CliResult<()> {
    let entities = cfg.data_file(files::ENTITIES);
    let anchors = cfg.data_file(files::ANCHORS);
    require_file(&entities)?;
    require_file(&anchors)?;
    let (kg, _) = load_kg(&entities, None).map_err(CliError::load)?;
    let at = build_alias_table_from_file(&anchors, &kg).map_err(CliError::load)?;
    ensure_work_dir(cfg)?;
    let out = cfg.work_file(artifacts::ALIAS);
    at.save(&out).map_err(CliError::load)?;
    println!(
        "alias table: {} mentions ({} anchors skipped: unknown entity, {} empty) -> {}",
        at.len(),
        at.diagnostics.skipped_unknown_entity,
        at.diagnostics.skipped_empty_surface,
        out.display()
    );
    Ok(())
}

/// `link`: items + alias + KG -> linked.tsv (sorted by item id).
pub fn link(cfg: &PipelineConfig) -> CliResult<()> {
    let (_, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let at = AliasTable::load(&require_artifact(cfg, artifacts::ALIAS)?).map_err(CliError::load)?;

    let mut linked = Vec::with_capacity(items.len());
    for raw in &items {
        let item = resolve_item(&kg, raw)?;
        linked.push(link_item(&item, &at, &kg).map_err(CliError::load)?);
    }
    linked.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let out = cfg.work_file(artifacts::LINKED);
    write_linked_items(&out, &linked).map_err(CliError::load)?;
    let with_entities = linked.iter().filter(|l| !l.entities.is_empty()).count();
    println!("linked {} items ({} with at least one entity) -> {}", linked.len(), with_entities, out.display());
    Ok(())
}

fn load_linked(cfg: &PipelineConfig) -> CliResult<BTreeMap<String, LinkedItem>> {
    let path = require_artifact(cfg, artifacts::LINKED)?;
    let linked = read_linked_items(&path).map_err(CliError::load)?;
    Ok(linked.into_iter().map(|l| (l.item_id.clone(), l)).collect())
}

/// `build-mekb`: linked items + interactions -> mekb.tsv.
pub fn build_mekb_cmd(cfg: &PipelineConfig) -> CliResult<()> {
    let (interactions, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let linked = load_linked(cfg)?;
    let prepared = prepare_split(cfg, &interactions);

    let users_of = |records: &[Interaction]| -> BTreeSet<String> {
        records.iter().map(|r| r.user_id.clone()).collect()
    };
    let source_users = users_of(&prepared.source_records);
    let target_users = users_of(&prepared.target_records);
    if let (Ok(or_st), Ok(or_ts)) = (
        mekb_core::eval::overlap_ratio(&source_users, &target_users),
        mekb_core::eval::overlap_ratio(&target_users, &source_users),
    ) {
        println!(
            "users: {} source, {} target, {} overlapped (OR {:.2}% / {:.2}%)",
            source_users.len(),
            target_users.len(),
            prepared.overlapped_users.len(),
            100.0 * or_st,
            100.0 * or_ts
        );
    }

    let mekbs = build_all_mekbs(cfg, &kg, &linked, &prepared);
    let empty = mekbs.iter().filter(|m| m.is_empty()).count();
    ensure_work_dir(cfg)?;
    let out = cfg.work_file(artifacts::MEKB);
    write_mekbs(&out, &mekbs).map_err(CliError::load)?;
    println!("built {} MeKBs ({} empty) -> {}", mekbs.len(), empty, out.display());
    Ok(())
}

/// `train-vocab`: entity titles -> vocab.txt.
pub fn train_vocab_cmd(cfg: &PipelineConfig) -> CliResult<()> {
    let (_, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let titles: Vec<String> = kg.entities().map(|e| e.title.clone()).collect();
    let vocab = train_vocab(&titles, cfg.vocab.size).map_err(CliError::load)?;
    ensure_work_dir(cfg)?;
    let out = cfg.work_file(artifacts::VOCAB);
    vocab.save(&out).map_err(CliError::load)?;
    println!("trained vocabulary of {} tokens -> {}", vocab.len(), out.display());
    Ok(())
}

fn load_vocab(cfg: &PipelineConfig) -> CliResult<Vocab> {
    let path = require_artifact(cfg, artifacts::VOCAB)?;
    Vocab::load(&path).map_err(CliError::load)
}

fn load_mekb_file(cfg: &PipelineConfig) -> CliResult<Vec<MeKb>> {
    let path = require_artifact(cfg, artifacts::MEKB)?;
    read_mekbs(&path).map_err(CliError::load)
}

/// `pretrain`: masked-token pretraining over MeKB sequences plus
/// per-item entity sequences -> pretrained.ckpt.
pub fn pretrain(cfg: &PipelineConfig) -> CliResult<()> {
    let (_, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let vocab = load_vocab(cfg)?;
    let mekbs = load_mekb_file(cfg)?;
    let linked = load_linked(cfg)?;
    let enc_cfg = cfg.encoder_config(vocab.len());

    let mut corpus: Vec<TokenSequence> =
        mekbs.iter().map(|m| build_sequence(m, &kg, &vocab, enc_cfg.n_max)).collect();
    // per-item entity co-occurrence sequences enrich the tiny corpus
    for item in linked.values() {
        if item.entities.is_empty() {
            continue;
        }
        let pseudo = MeKb {
            user_id: item.item_id.clone(),
            entries: item
                .entities
                .iter()
                .map(|e| InterestEntry {
                    entity_id: e.clone(),
                    raw_count: 1,
                    tf: 1.0,
                    idf: 1.0,
                    score: 1.0 / item.entities.len() as f64,
                })
                .collect(),
        };
        corpus.push(build_sequence(&pseudo, &kg, &vocab, enc_cfg.n_max));
    }

    let params = UserEncoderParams::init(&enc_cfg);
    let outcome = pretrain_mlm(&corpus, params, &enc_cfg, &cfg.pretrain_config())
        .map_err(train_error_to_cli)?;
    ensure_work_dir(cfg)?;
    let ckpt = cfg.work_file(artifacts::PRETRAINED);
    save_checkpoint(&ckpt, &enc_cfg, &outcome.params, None).map_err(CliError::load)?;

    let mut log = String::new();
    for (step, loss) in outcome.step_losses.iter().enumerate() {
        writeln!(log, "{step}\t{loss:.6}").expect("string write");
    }
    std::fs::write(cfg.work_file(artifacts::PRETRAIN_LOG), log)
        .context("writing pretrain metrics")?;
    let first = outcome.step_losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.step_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained on {} sequences: loss {:.4} -> {:.4} over {} steps -> {}",
        corpus.len(),
        first,
        last,
        outcome.step_losses.len(),
        ckpt.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InitMode {
    /// Use pretrained.ckpt when present, otherwise random init.
    Auto,
    /// Require pretrained.ckpt.
    Pretrained,
    /// Ignore pretrained.ckpt.
    Random,
}

fn train_error_to_cli(err: TrainError) -> CliError {
    let code = match err {
        TrainError::NonFinite { .. } => EXIT_NAN,
        _ => crate::pipeline::EXIT_GENERIC,
    };
    CliError { code, error: err.into() }
}

/// Gathers the state every training/evaluation command needs.
struct ModelInputs {
    vocab: Vocab,
    sequences: BTreeMap<String, TokenSequence>,
    catalog: Vec<String>,
    prepared: PreparedData,
}

fn load_model_inputs(cfg: &PipelineConfig) -> CliResult<ModelInputs> {
    let (interactions, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let vocab = load_vocab(cfg)?;
    let mekbs = load_mekb_file(cfg)?;
    let sequences = sequences_for(&mekbs, &kg, &vocab, cfg.encoder.n_max);
    let catalog = target_catalog(cfg, &items);
    let prepared = prepare_split(cfg, &interactions);
    Ok(ModelInputs { vocab, sequences, catalog, prepared })
}

/// `train`: dual-encoder fine-tuning on the train split -> model.ckpt.
pub fn train(cfg: &PipelineConfig, init: InitMode) -> CliResult<()> {
    let inputs = load_model_inputs(cfg)?;
    let enc_cfg = cfg.encoder_config(inputs.vocab.len());
    let pretrained_path = cfg.work_file(artifacts::PRETRAINED);

    let params = match init {
        InitMode::Random => UserEncoderParams::init(&enc_cfg),
        InitMode::Pretrained | InitMode::Auto if pretrained_path.is_file() => {
            let (loaded_cfg, params, _) = load_checkpoint(&pretrained_path).map_err(CliError::load)?;
            if loaded_cfg != enc_cfg {
                return Err(CliError::load(anyhow!(
                    "pretrained checkpoint config does not match the pipeline config"
                )));
            }
            println!("initializing from {}", pretrained_path.display());
            params
        }
        InitMode::Pretrained => {
            require_file(&pretrained_path)?;
            unreachable!("require_file fails on missing checkpoint");
        }
        InitMode::Auto => {
            println!("no pretrained checkpoint found; random initialization");
            UserEncoderParams::init(&enc_cfg)
        }
    };

    let tower = ItemTower::init(inputs.catalog.iter().cloned(), enc_cfg.k_dim, cfg.tower_seed());
    let (examples, skipped) =
        training_examples(&inputs.prepared.split.train, &inputs.sequences, &tower);
    if skipped > 0 {
        println!("skipped {skipped} train records (empty MeKB or unknown item)");
    }
    if examples.is_empty() {
        return Err(CliError::generic(anyhow!("no eligible training examples")));
    }

    let train_cfg = cfg.train_config();
    let outcome = train_dual_encoder(&examples, params, tower, &enc_cfg, &train_cfg)
        .map_err(train_error_to_cli)?;

    ensure_work_dir(cfg)?;
    let ckpt = cfg.work_file(artifacts::MODEL);
    save_checkpoint(&ckpt, &enc_cfg, &outcome.params, Some(&outcome.tower))
        .map_err(CliError::load)?;

    let n_batches = examples.len().div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * n_batches;
    let warmup_steps = train_cfg.warmup_epochs * n_batches;
    let mut log = String::new();
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        let last_step = (epoch + 1) * n_batches - 1;
        let lr = lr_at(last_step, total_steps, warmup_steps, train_cfg.lr);
        writeln!(log, "{epoch}\t{loss:.6}\t{lr:.8}").expect("string write");
    }
    std::fs::write(cfg.work_file(artifacts::TRAIN_LOG), log).context("writing metrics log")?;
    println!(
        "trained on {} examples over {} epochs: loss {:.4} -> {:.4} -> {}",
        examples.len(),
        train_cfg.epochs,
        outcome.epoch_losses.first().unwrap(),
        outcome.epoch_losses.last().unwrap(),
        ckpt.display()
    );
    Ok(())
}

fn training_examples(
    records: &[Interaction],
    sequences: &BTreeMap<String, TokenSequence>,
    tower: &ItemTower,
) -> (Vec<TrainingExample>, usize) {
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for r in records {
        let eligible = sequences
            .get(&r.user_id)
            .filter(|s| !s.is_all_padding())
            .filter(|_| tower.index_of(&r.item_id).is_some());
        match eligible {
            Some(seq) => examples.push(TrainingExample {
                user_id: r.user_id.clone(),
                seq: seq.clone(),
                positive: r.item_id.clone(),
            }),
            None => skipped += 1,
        }
    }
    (examples, skipped)
}

/// Scorer over precomputed user embeddings and the item tower.
struct ModelScorer {
    user_vecs: BTreeMap<String, Vec<f64>>,
    tower: ItemTower,
}

impl Scorer for ModelScorer {
    fn scores(&self, user_id: &str, candidates: &[usize]) -> Option<Vec<f64>> {
        let u = self.user_vecs.get(user_id)?;
        Some(candidates.iter().map(|&i| score(u, self.tower.embedding(i))).collect())
    }
}

/// Train-split popularity baseline: an item's score is its training
/// interaction count, identical for every user.
struct PopularityScorer {
    counts: Vec<f64>,
}

impl Scorer for PopularityScorer {
    fn scores(&self, _user: &str, candidates: &[usize]) -> Option<Vec<f64>> {
        Some(candidates.iter().map(|&i| self.counts[i]).collect())
    }
}

struct EvalSetup {
    records: Vec<RankRecord>,
    interacted: BTreeMap<String, BTreeSet<usize>>,
    train_counts: BTreeMap<String, usize>,
    popularity: PopularityScorer,
    skipped_unknown_items: usize,
}

fn eval_setup(prepared: &PreparedData, tower: &ItemTower) -> EvalSetup {
    let mut skipped_unknown_items = 0usize;
    let mut records = Vec::new();
    for r in &prepared.split.test {
        match tower.index_of(&r.item_id) {
            Some(idx) => records.push(RankRecord { user_id: r.user_id.clone(), positive_idx: idx }),
            None => skipped_unknown_items += 1,
        }
    }
    let mut interacted: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for r in &prepared.target_records {
        if let Some(idx) = tower.index_of(&r.item_id) {
            interacted.entry(r.user_id.clone()).or_default().insert(idx);
        }
    }
    let mut train_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut popularity = vec![0.0; tower.len()];
    for r in &prepared.split.train {
        *train_counts.entry(r.user_id.clone()).or_insert(0) += 1;
        if let Some(idx) = tower.index_of(&r.item_id) {
            popularity[idx] += 1.0;
        }
    }
    EvalSetup {
        records,
        interacted,
        train_counts,
        popularity: PopularityScorer { counts: popularity },
        skipped_unknown_items,
    }
}

fn report_block(name: &str, report: &EvalReport) -> (String, String) {
    let mut text = format!("== {name}\n{}", report.to_table());
    text.push('\n');
    let tsv: String = report
        .to_tsv()
        .lines()
        .map(|line| format!("{name}\t{line}\n"))
        .collect();
    (text, tsv)
}

/// `evaluate`: sampled-negative ranking of the test split, binned by
/// user activity, for the trained model and a popularity baseline.
pub fn evaluate_cmd(cfg: &PipelineConfig) -> CliResult<()> {
    let inputs = load_model_inputs(cfg)?;
    let ckpt = require_artifact(cfg, artifacts::MODEL)?;
    let (enc_cfg, params, tower) = load_checkpoint(&ckpt).map_err(CliError::load)?;
    let tower = tower
        .ok_or_else(|| CliError::load(anyhow!("model checkpoint lacks the item tower")))?;

    let setup = eval_setup(&inputs.prepared, &tower);
    if setup.skipped_unknown_items > 0 {
        eprintln!(
            "note: {} test records reference items outside the catalog",
            setup.skipped_unknown_items
        );
    }

    // encode each distinct test user once
    let mut user_vecs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in &setup.records {
        if user_vecs.contains_key(&record.user_id) {
            continue;
        }
        if let Some(seq) = inputs.sequences.get(&record.user_id) {
            if !seq.is_all_padding() {
                let vec = params.encode(&enc_cfg, seq).map_err(CliError::load)?;
                user_vecs.insert(record.user_id.clone(), vec);
            }
        }
    }
    let model_scorer = ModelScorer { user_vecs, tower };

    let model_report = evaluate_binned(
        &model_scorer,
        &setup.records,
        &setup.interacted,
        &setup.train_counts,
        model_scorer.tower.len(),
        cfg.eval.k,
        cfg.eval.n_neg,
        cfg.eval_seed(),
    )
    .map_err(|e| CliError::generic(e.into()))?;
    let popularity_report = evaluate_binned(
        &setup.popularity,
        &setup.records,
        &setup.interacted,
        &setup.train_counts,
        model_scorer.tower.len(),
        cfg.eval.k,
        cfg.eval.n_neg,
        cfg.eval_seed(),
    )
    .map_err(|e| CliError::generic(e.into()))?;

    let (model_text, model_tsv) = report_block("model", &model_report);
    let (pop_text, pop_tsv) = report_block("popularity", &popularity_report);
    let text = format!("{model_text}{pop_text}");
    ensure_work_dir(cfg)?;
    std::fs::write(cfg.work_file(artifacts::REPORT_TEXT), &text).context("writing report")?;
    std::fs::write(cfg.work_file(artifacts::REPORT_TSV), format!("{model_tsv}{pop_tsv}"))
        .context("writing report tsv")?;
    print!("{text}");
    Ok(())
}

/// `retrieve`: top-n target items for one user by dot-product score.
pub fn retrieve(cfg: &PipelineConfig, user: &str, top: usize) -> CliResult<()> {
    let (_, items) = load_dataset(cfg)?;
    let kg = load_graph(cfg, &items)?;
    let vocab = load_vocab(cfg)?;
    let mekbs = load_mekb_file(cfg)?;
    let ckpt = require_artifact(cfg, artifacts::MODEL)?;
    let (enc_cfg, params, tower) = load_checkpoint(&ckpt).map_err(CliError::load)?;
    let tower = tower
        .ok_or_else(|| CliError::load(anyhow!("model checkpoint lacks the item tower")))?;

    let mekb = mekbs.iter().find(|m| m.user_id == user).filter(|m| !m.is_empty());
    let Some(mekb) = mekb else {
        return Err(CliError {
            code: EXIT_COLD_USER,
            error: anyhow!("cold user, no MeKB: {user:?} cannot be encoded"),
        });
    };
    let seq = build_sequence(mekb, &kg, &vocab, enc_cfg.n_max);
    let user_vec = params.encode(&enc_cfg, &seq).map_err(CliError::load)?;

    let mut scored: Vec<(f64, &str)> = (0..tower.len())
        .map(|i| (score(&user_vec, tower.embedding(i)), tower.id_at(i)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    for (s, item_id) in scored.into_iter().take(top) {
        println!("{item_id}\t{s:.6}");
    }
    Ok(())
}

fn ensure_work_dir(cfg: &PipelineConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.paths.work_dir)
        .with_context(|| format!("creating {}", cfg.paths.work_dir.display()))?;
    Ok(())
}
