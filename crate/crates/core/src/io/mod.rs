//! File formats and run configuration: JSON configs with presets, the corpus
//! text format, binary checkpoints and JSONL metrics.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{Ablation, ReferenceConfig, RunConfig};
pub use corpus::{parse_corpus, parse_corpus_str, write_corpus, CorpusEntry};
pub use metrics::{MetricsRecord, MetricsWriter};
