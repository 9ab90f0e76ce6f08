//! Interaction logs to fixed-length, leave-one-out user sequences.

mod format;
mod ingest;
mod noise;
mod sequences;
mod synth;

pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use ingest::{ingest_interactions, ingest_with, Delimiter, IngestOptions, IngestReport, InteractionRecord};
pub use noise::{inject_noise, NoiseReport, NoiseSpec};
pub use sequences::{build_sequences, BuildReport, DatasetStats, SequenceDataset, Split};
pub use synth::{synth_markov_dataset, synth_preference_dataset, MarkovChain};
