//! Dataset ingestion and the procedural synthetic corpus.

pub mod dataset;
pub mod synthetic;

pub use dataset::{ingest_dataset, Dataset, Record, Skipped, Split};
pub use synthetic::{generate_samples, generate_synthetic_corpus, SyntheticSample, SyntheticSpec, DEFAULT_PROMPT};
