//! Shared fixtures for the benchmarks.

use meta_sgcl::data::{synth_markov_dataset, SequenceDataset};
use meta_sgcl::objective::TrainBatch;
use meta_sgcl::trainer::training_pairs;
use meta_sgcl::ModelConfig;

/// Markov dataset and a matching model config of hidden width `d`.
pub fn fixture(users: usize, items: usize, seq_len: usize, d: usize) -> (SequenceDataset, ModelConfig) {
    let ds = synth_markov_dataset(users, items, seq_len, 4.0, 1).expect("synthetic dataset");
    let mc = ModelConfig {
        num_items: items,
        max_len: ds.max_len,
        hidden_dim: d,
        ..Default::default()
    };
    (ds, mc)
}

/// The first `size` training pairs as one batch.
pub fn batch(ds: &SequenceDataset, size: usize) -> TrainBatch {
    let pairs = training_pairs(ds);
    let take = &pairs[..size.min(pairs.len())];
    TrainBatch {
        inputs: take.iter().map(|p| p.0.clone()).collect(),
        targets: take.iter().map(|p| p.1.clone()).collect(),
    }
}
