use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::generator::predict_scores;
use crate::model::Model;

/// Cutoffs reported by default.
pub const REPORT_KS: [usize; 2] = [5, 10];

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users: usize,
    /// Hex hash of the model configuration, empty for non-model rankers.
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize], config_hash: String) -> Result<Self> {
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            let (h, n) = metrics_at_k(ranks, k)?;
            hr.insert(k, h);
            ndcg.insert(k, n);
        }
        Ok(EvalReport {
            hr,
            ndcg,
            num_users: ranks.len(),
            config_hash,
        })
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// `1 + #{j : scores[j] >= scores[target]}` over the other items, so the
/// target loses every tie. `target` is 1-based; `scores[0]` is item 1.
pub fn rank_target(scores: &[f64], target: u32) -> usize {
    let t = target as usize - 1;
    let s = scores[t];
    1 + scores.iter().enumerate().filter(|&(j, &x)| j != t && x >= s).count()
}

/// `(HR@k, NDCG@k)` for a single held-out item per user.
pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks to aggregate".into()));
    }
    if k == 0 {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    let (mut hits, mut gain) = (0usize, 0.0);
    for &r in ranks {
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let m = ranks.len() as f64;
    Ok((hits as f64 / m, gain / m))
}

fn split_input(ds: &SequenceDataset, u: usize, split: SplitKind) -> (Vec<u32>, u32) {
    match split {
        SplitKind::Validation => (ds.validation_input(u), ds.splits[u].valid_target),
        SplitKind::Test => (ds.test_input(u), ds.splits[u].test_target),
    }
}

/// Rank of every user's held-out item under the deterministic forward pass.
pub fn evaluate_ranks(model: &Model, ds: &SequenceDataset, split: SplitKind) -> Result<Vec<usize>> {
    if model.num_items() != ds.num_items() {
        return Err(Error::VocabMismatch {
            model: model.num_items(),
            dataset: ds.num_items(),
        });
    }
    if model.config.max_len != ds.max_len {
        return Err(Error::Config(format!(
            "model max_len {} differs from dataset max_len {}",
            model.config.max_len, ds.max_len
        )));
    }
    let users: Vec<usize> = (0..ds.num_users()).collect();
    let mut ranks = Vec::with_capacity(users.len());
    for chunk in users.chunks(EVAL_BATCH) {
        let (inputs, targets): (Vec<Vec<u32>>, Vec<u32>) = chunk.iter().map(|&u| split_input(ds, u, split)).unzip();
        let scores = predict_scores(model, &inputs)?;
        for (row, &t) in scores.rows().into_iter().zip(&targets) {
            ranks.push(rank_target(row.as_slice().expect("contiguous rows"), t));
        }
    }
    Ok(ranks)
}

pub fn evaluate_at(model: &Model, ds: &SequenceDataset, split: SplitKind, ks: &[usize]) -> Result<EvalReport> {
    let ranks = evaluate_ranks(model, ds, split)?;
    EvalReport::from_ranks(&ranks, ks, format!("{:016x}", model.config.hash()))
}

/// HR and NDCG at 5 and 10 on the chosen split.
pub fn evaluate(model: &Model, ds: &SequenceDataset, split: SplitKind) -> Result<EvalReport> {
    evaluate_at(model, ds, split, &REPORT_KS)
}

/// Ranks under a constant score equal to each item's training frequency.
pub fn popularity_ranks(ds: &SequenceDataset, split: SplitKind) -> Vec<usize> {
    let freq: Vec<f64> = ds.item_frequencies()[1..].iter().map(|&c| c as f64).collect();
    (0..ds.num_users())
        .map(|u| rank_target(&freq, split_input(ds, u, split).1))
        .collect()
}

pub fn popularity_report(ds: &SequenceDataset, split: SplitKind, ks: &[usize]) -> Result<EvalReport> {
    EvalReport::from_ranks(&popularity_ranks(ds, split), ks, String::new())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_markov_dataset;

    fn sort_rank(scores: &[f64], target: u32) -> usize {
        // stable sort descending, target placed after its ties
        let t = target as usize - 1;
        let mut order: Vec<usize> = (0..scores.len()).filter(|&j| j != t).collect();
        order.push(t);
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        order.iter().position(|&j| j == t).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[0.1, 0.9, 0.3], 2), 1);
        assert_eq!(rank_target(&[1.0; 10], 4), 10);
        let s = [0.3, -1.0, 2.0, 0.3, 0.5];
        for t in 1..=5 {
            assert_eq!(rank_target(&s, t), sort_rank(&s, t));
        }
        assert_eq!(rank_target(&s, 1), 4);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics_at_k(&[1, 1, 1], 5).unwrap(), (1.0, 1.0));
        assert_eq!(metrics_at_k(&[3], 5).unwrap(), (1.0, 0.5));
        assert_eq!(metrics_at_k(&[6], 5).unwrap(), (0.0, 0.0));
        assert!(metrics_at_k(&[], 5).is_err());
        assert!(metrics_at_k(&[1], 0).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_sort(scores in prop::collection::vec(-3i32..3, 1..30), pick in 0usize..30) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64 * 0.5).collect();
            let t = (pick % s.len()) as u32 + 1;
            prop_assert_eq!(rank_target(&s, t), sort_rank(&s, t));
            // HR@N is always 1
            prop_assert_eq!(metrics_at_k(&[rank_target(&s, t)], s.len()).unwrap().0, 1.0);
        }

        #[test]
        fn monotone_transform_invariance(scores in prop::collection::vec(-5.0f64..5.0, 2..20), pick in 0usize..20) {
            let t = (pick % scores.len()) as u32 + 1;
            let g: Vec<f64> = scores.iter().map(|&x| (0.7 * x).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(rank_target(&scores, t), rank_target(&g, t));
        }

        #[test]
        fn report_invariants(ranks in prop::collection::vec(1usize..40, 1..50)) {
            let r = EvalReport::from_ranks(&ranks, &[1, 5, 10, 20], String::new()).unwrap();
            let mut prev = (0.0, 0.0);
            for k in [1, 5, 10, 20] {
                let (h, n) = (r.hr_at(k), r.ndcg_at(k));
                prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&n));
                prop_assert!(h >= n);
                prop_assert!(h >= prev.0 && n >= prev.1);
                prev = (h, n);
            }
        }
    }

    fn model_for(ds: &crate::data::SequenceDataset, seed: u64) -> Model {
        Model::new(ModelConfig {
            num_items: ds.num_items(),
            max_len: ds.max_len,
            hidden_dim: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn evaluation_is_deterministic_and_read_only() {
        let ds = synth_markov_dataset(40, 15, 8, 2.0, 3).unwrap();
        let m = model_for(&ds, 1);
        let before = m.params.checksum();
        let a = evaluate(&m, &ds, SplitKind::Test).unwrap();
        let b = evaluate(&m, &ds, SplitKind::Test).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.params.checksum(), before);
        assert_eq!(a.num_users, 40);
        assert_eq!(a.config_hash.len(), 16);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let ds = synth_markov_dataset(5, 15, 8, 2.0, 3).unwrap();
        let mut cfg = model_for(&ds, 1).config;
        cfg.num_items = 16;
        let m = Model::new(cfg).unwrap();
        assert!(matches!(
            evaluate(&m, &ds, SplitKind::Test),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn batched_ranks_match_single_sequence_scoring() {
        let ds = synth_markov_dataset(7, 12, 9, 1.0, 5).unwrap();
        let m = model_for(&ds, 2);
        let ranks = evaluate_ranks(&m, &ds, SplitKind::Validation).unwrap();
        for u in 0..ds.num_users() {
            let out =
                crate::generator::forward_twin(&m, &ds.validation_input(u), &mut crate::generator::ForwardMode::eval())
                    .unwrap();
            assert_eq!(ranks[u], rank_target(&out.scores, ds.splits[u].valid_target));
        }
    }

    #[test]
    fn target_inside_prefix_is_still_ranked() {
        let mut ds = synth_markov_dataset(3, 12, 9, 1.0, 5).unwrap();
        let first = ds.train_items(0)[0];
        ds.splits[0].test_target = first;
        let m = model_for(&ds, 2);
        assert_eq!(evaluate_ranks(&m, &ds, SplitKind::Test).unwrap().len(), 3);
    }

    #[test]
    fn popularity_prefers_frequent_items() {
        let mut ds = synth_markov_dataset(4, 6, 8, 0.0, 5).unwrap();
        for u in 0..ds.num_users() {
            let n = ds.max_len;
            ds.sequences[u] = vec![2; n];
            ds.lengths[u] = n;
            ds.splits[u].test_target = 2;
        }
        let r = popularity_ranks(&ds, SplitKind::Test);
        assert!(r.iter().all(|&x| x == 1));
    }
}
