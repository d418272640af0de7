//! Cross-domain recommendation via personal knowledge graphs.
//!
//! The pipeline turns a user's source-domain behavior into a weighted
//! entity profile (a MeKB), serializes that profile as a token sequence,
//! and trains a transformer dual encoder that aligns user embeddings with
//! target-domain item embeddings for retrieval.
//!
//! Modules follow the pipeline order:
//!
//! 1. [`kgstore`] — the global knowledge graph and dataset-specific
//!    augmentation entities.
//! 2. [`alias`] — mention → entity anchor statistics and the linking
//!    prior `P(e|m)`.
//! 3. [`linker`] — gazetteer mention extraction and top-1 entity linking
//!    over item text.
//! 4. [`mekb`] — per-user interest aggregation: smoothed term frequency,
//!    interest IDF, and the normalized interest score.
//! 5. [`tokenizer`] — subword vocabulary training and MeKB sequence
//!    serialization.
//! 6. [`encoder`] — the transformer user encoder and the item ID-embedding
//!    tower, with exact analytic gradients.
//! 7. [`training`] — masked-token pretraining and dual-encoder fine-tuning
//!    with full-softmax loss under LAMB + cosine schedule.
//! 8. [`eval`] — dataset splitting, sampled-negative ranking metrics, and
//!    frequency-binned analysis.
//! 9. [`dataio`] — file formats, ingestion, and the seeded synthetic
//!    dataset generator.

pub mod alias;
pub mod dataio;
pub mod encoder;
pub mod eval;
pub mod kgstore;
pub mod linker;
pub mod matrix;
pub mod mekb;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use alias::AliasTable;
pub use encoder::{EncoderConfig, ItemTower, UserEncoderParams};
pub use eval::{EvalReport, SplitSpec};
pub use kgstore::{Entity, EntitySource, KnowledgeGraph, Triple};
pub use linker::{Item, LinkedItem};
pub use matrix::Matrix;
pub use mekb::{IdfTable, InterestEntry, MeKb, MeKbConfig};
pub use tokenizer::{TokenSequence, Vocab};
pub use training::TrainConfig;
