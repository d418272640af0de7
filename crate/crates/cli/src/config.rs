//! Pipeline configuration: one TOML file names every path and
//! hyperparameter; subcommands read it and derive their per-phase seeds
//! from the global one. The file round-trips losslessly through serde.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mekb_core::encoder::EncoderConfig;
use mekb_core::eval::SplitSpec;
use mekb_core::mekb::MeKbConfig;
use mekb_core::training::{OptimizerKind, Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Global seed; phase seeds derive from it (split = seed,
    /// encoder init = seed, pretrain = seed + 1, fine-tune = seed + 2,
    /// evaluation sampling = seed + 3, item tower = seed + 4).
    pub seed: u64,
    pub paths: Paths,
    pub domains: Domains,
    pub filter: Filter,
    pub mekb: MekbSection,
    pub vocab: VocabSection,
    pub encoder: EncoderSection,
    pub pretrain: PhaseSection,
    pub train: PhaseSection,
    pub split: SplitSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Directory with entities.tsv, triples.tsv, anchors.tsv, items.tsv,
    /// interactions.tsv.
    pub data_dir: PathBuf,
    /// Directory for derived artifacts (created on demand).
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domains {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub min_user_positives: usize,
    pub min_item_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MekbSection {
    pub k_star: u64,
    pub apply_base_weight: bool,
    /// Also count target-domain train-split interactions into MeKBs.
    pub include_target_train: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSection {
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub k_dim: usize,
    pub n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub cold_start_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub k: usize,
    pub n_neg: usize,
}

impl PipelineConfig {
    /// Reads a config file. Relative `data_dir`/`work_dir` are resolved
    /// against the config file's directory, so a generated dataset is
    /// self-contained wherever it lives.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(base) = path.parent() {
            for dir in [&mut cfg.paths.data_dir, &mut cfg.paths.work_dir] {
                if dir.is_relative() {
                    *dir = base.join(&dir);
                }
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(path, text).with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    /// Defaults for a freshly generated synthetic dataset: a small model
    /// that trains on one CPU core in seconds, no frequency filtering.
    pub fn synth_preset(data_dir: PathBuf, work_dir: PathBuf, seed: u64) -> Self {
        PipelineConfig {
            seed,
            paths: Paths { data_dir, work_dir },
            domains: Domains { source: "source".to_string(), target: "target".to_string() },
            filter: Filter { min_user_positives: 1, min_item_positives: 1 },
            mekb: MekbSection { k_star: 10, apply_base_weight: true, include_target_train: false },
            vocab: VocabSection { size: 512 },
            encoder: EncoderSection {
                n_layers: 2,
                n_heads: 2,
                d_model: 32,
                d_ffn: 64,
                k_dim: 16,
                n_max: 48,
            },
            pretrain: PhaseSection {
                epochs: 6,
                batch_size: 16,
                lr: 1e-2,
                weight_decay: 5e-4,
                warmup_epochs: 1,
                optimizer: OptimizerKind::Lamb,
                schedule: Schedule::Cosine,
            },
            train: PhaseSection {
                epochs: 15,
                batch_size: 16,
                lr: 2e-2,
                weight_decay: 5e-4,
                warmup_epochs: 1,
                optimizer: OptimizerKind::Lamb,
                schedule: Schedule::Cosine,
            },
            split: SplitSection { train: 0.8, valid: 0.1, test: 0.1, cold_start_fraction: 0.2 },
            eval: EvalSection { k: 10, n_neg: 999 },
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.encoder.n_layers,
            n_heads: self.encoder.n_heads,
            d_model: self.encoder.d_model,
            d_ffn: self.encoder.d_ffn,
            k_dim: self.encoder.k_dim,
            n_max: self.encoder.n_max,
            vocab_size,
            seed: self.seed,
        }
    }

    pub fn mekb_config(&self) -> MeKbConfig {
        MeKbConfig { k_star: self.mekb.k_star, apply_base_weight: self.mekb.apply_base_weight }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.split.train,
            valid_fraction: self.split.valid,
            test_fraction: self.split.test,
            cold_start_fraction: self.split.cold_start_fraction,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        phase_to_train(&self.pretrain, self.seed.wrapping_add(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        phase_to_train(&self.train, self.seed.wrapping_add(2))
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn tower_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn data_file(&self, name: &str) -> PathBuf {
        self.paths.data_dir.join(name)
    }

    pub fn work_file(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }
}

fn phase_to_train(phase: &PhaseSection, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: phase.epochs,
        batch_size: phase.batch_size,
        lr: phase.lr,
        weight_decay: phase.weight_decay,
        warmup_epochs: phase.warmup_epochs,
        schedule: phase.schedule,
        optimizer: phase.optimizer,
        seed,
        freeze_encoder: false,
    }
}

/// Artifact file names under the work directory.
pub mod artifacts {
    pub const ALIAS: &str = "alias.tsv";
    pub const LINKED: &str = "linked.tsv";
    pub const MEKB: &str = "mekb.tsv";
    pub const VOCAB: &str = "vocab.txt";
    pub const PRETRAINED: &str = "pretrained.ckpt";
    pub const MODEL: &str = "model.ckpt";
    pub const PRETRAIN_LOG: &str = "pretrain_metrics.log";
    pub const TRAIN_LOG: &str = "metrics.log";
    pub const REPORT_TEXT: &str = "report.txt";
    pub const REPORT_TSV: &str = "report.tsv";
}
