use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ingest::InteractionRecord;
use super::synth::MarkovChain;
use crate::error::{Error, Result};

/// Held-out targets of one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub valid_target: u32,
    pub test_target: u32,
}

/// Left-padded user sequences with leave-one-out targets.
///
/// `sequences[u]` holds the training prefix (everything except the last two
/// interactions), right-aligned, so position `max_len - 1` is the most recent
/// training item. Index 0 is padding; items use `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub max_len: usize,
    pub users: Vec<String>,
    /// `item_vocab[i - 1]` is the external id of item index `i`.
    pub item_vocab: Vec<String>,
    pub sequences: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub splits: Vec<Split>,
    /// Generating chain, present for synthetic data.
    pub markov: Option<MarkovChain>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub users_in: usize,
    pub users_kept: usize,
    pub excluded_short: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    /// Interactions held in the dataset, held-out targets included.
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

pub(crate) fn left_pad(items: &[u32], max_len: usize) -> Vec<u32> {
    let tail = &items[items.len().saturating_sub(max_len)..];
    let mut row = vec![0; max_len - tail.len()];
    row.extend_from_slice(tail);
    row
}

impl SequenceDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn item_index(&self) -> HashMap<&str, u32> {
        self.item_vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32 + 1))
            .collect()
    }

    /// Unpadded training prefix of user `u`.
    pub fn train_items(&self, u: usize) -> &[u32] {
        let row = &self.sequences[u];
        &row[row.len() - self.lengths[u]..]
    }

    /// Input row used to score the validation target.
    pub fn validation_input(&self, u: usize) -> Vec<u32> {
        self.sequences[u].clone()
    }

    /// Input row used to score the test target: prefix plus validation item.
    pub fn test_input(&self, u: usize) -> Vec<u32> {
        let mut items = self.train_items(u).to_vec();
        items.push(self.splits[u].valid_target);
        left_pad(&items, self.max_len)
    }

    /// Shifted next-item pair over the training prefix, `None` when the
    /// prefix has a single item.
    pub fn training_pair(&self, u: usize) -> Option<(Vec<u32>, Vec<u32>)> {
        let items = self.train_items(u);
        if items.len() < 2 {
            return None;
        }
        let input = left_pad(&items[..items.len() - 1], self.max_len);
        let target = left_pad(&items[1..], self.max_len);
        Some((input, target))
    }

    /// Occurrence counts per item index in the training prefixes (slot 0 unused).
    pub fn item_frequencies(&self) -> Vec<u64> {
        let mut f = vec![0u64; self.num_items() + 1];
        for u in 0..self.num_users() {
            for &v in self.train_items(u) {
                f[v as usize] += 1;
            }
        }
        f
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.lengths.iter().map(|l| l + 2).sum();
        let (m, n) = (self.num_users(), self.num_items());
        DatasetStats {
            users: m,
            items: n,
            interactions,
            avg_length: interactions as f64 / m.max(1) as f64,
            sparsity: 1.0 - interactions as f64 / (m.max(1) * n.max(1)) as f64,
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.users.len();
        let n = self.num_items() as u32;
        if m == 0 || n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} < 3", self.max_len)));
        }
        if self.sequences.len() != m || self.lengths.len() != m || self.splits.len() != m {
            return Err(Error::Format("per-user tables disagree in length".into()));
        }
        for u in 0..m {
            let row = &self.sequences[u];
            let len = self.lengths[u];
            if row.len() != self.max_len || len > self.max_len {
                return Err(Error::Format(format!("user {u}: bad row shape")));
            }
            let (pad, items) = row.split_at(self.max_len - len);
            if pad.iter().any(|&v| v != 0) || items.iter().any(|&v| v == 0 || v > n) {
                return Err(Error::Format(format!("user {u}: bad padding or index")));
            }
            let s = self.splits[u];
            for t in [s.valid_target, s.test_target] {
                if t == 0 || t > n {
                    return Err(Error::OutOfRange {
                        index: t as usize,
                        max: n as usize,
                    });
                }
            }
        }
        if let Some(chain) = &self.markov {
            if chain.num_items() != n as usize {
                return Err(Error::Format("chain size differs from vocabulary".into()));
            }
        }
        Ok(())
    }
}

/// Groups sorted records per user and applies the leave-one-out split.
///
/// Only the last `max_len + 2` interactions of each user are kept; users with
/// fewer than three are excluded and counted in the report.
pub fn build_sequences(records: &[InteractionRecord], max_len: usize) -> Result<(SequenceDataset, BuildReport)> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be >= 3, got {max_len}")));
    }
    let mut report = BuildReport::default();
    let mut groups: Vec<(&str, Vec<&str>)> = Vec::new();
    for r in records {
        match groups.last_mut() {
            Some((u, items)) if *u == r.user_id => items.push(&r.item_id),
            _ => groups.push((&r.user_id, vec![&r.item_id])),
        }
    }
    report.users_in = groups.len();

    let mut vocab: Vec<String> = Vec::new();
    let mut index: HashMap<&str, u32> = HashMap::new();
    let mut ds = SequenceDataset {
        max_len,
        users: Vec::new(),
        item_vocab: Vec::new(),
        sequences: Vec::new(),
        lengths: Vec::new(),
        splits: Vec::new(),
        markov: None,
    };
    for (user, items) in groups {
        if items.len() < 3 {
            report.excluded_short += 1;
            continue;
        }
        let kept = &items[items.len().saturating_sub(max_len + 2)..];
        let idx: Vec<u32> = kept
            .iter()
            .map(|&it| {
                *index.entry(it).or_insert_with(|| {
                    vocab.push(it.to_string());
                    vocab.len() as u32
                })
            })
            .collect();
        let n = idx.len();
        let prefix = &idx[..n - 2];
        ds.users.push(user.to_string());
        ds.sequences.push(left_pad(prefix, max_len));
        ds.lengths.push(prefix.len());
        ds.splits.push(Split {
            valid_target: idx[n - 2],
            test_target: idx[n - 1],
        });
    }
    if ds.users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ds.item_vocab = vocab;
    report.users_kept = ds.users.len();
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, t: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
            rating: None,
        }
    }

    fn history(u: &str, items: &[&str]) -> Vec<InteractionRecord> {
        items.iter().enumerate().map(|(t, i)| rec(u, i, t as i64)).collect()
    }

    #[test]
    fn three_item_history() {
        let (ds, _) = build_sequences(&history("u", &["a", "b", "c"]), 5).unwrap();
        let idx = ds.item_index();
        assert_eq!(ds.train_items(0), &[idx["a"]]);
        assert_eq!(ds.splits[0].valid_target, idx["b"]);
        assert_eq!(ds.splits[0].test_target, idx["c"]);
        assert!(ds.training_pair(0).is_none());
    }

    #[test]
    fn four_item_history_max_len_three() {
        let (ds, _) = build_sequences(&history("u", &["a", "b", "c", "d"]), 3).unwrap();
        let idx = ds.item_index();
        let (a, b, c, d) = (idx["a"], idx["b"], idx["c"], idx["d"]);
        assert_eq!(ds.sequences[0], vec![0, a, b]);
        assert_eq!(
            ds.splits[0],
            Split {
                valid_target: c,
                test_target: d
            }
        );
        assert_eq!(ds.validation_input(0), vec![0, a, b]);
        assert_eq!(ds.test_input(0), vec![a, b, c]);
        assert_eq!(ds.training_pair(0), Some((vec![0, 0, a], vec![0, 0, b])));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let items: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
        let (ds, _) = build_sequences(&history("u", &refs), 4).unwrap();
        let names: Vec<&str> = ds
            .train_items(0)
            .iter()
            .map(|&v| ds.item_vocab[v as usize - 1].as_str())
            .collect();
        assert_eq!(names, vec!["i4", "i5", "i6", "i7"]);
        assert_eq!(ds.item_vocab[ds.splits[0].test_target as usize - 1], "i9");
        // vocabulary only covers retained interactions
        assert_eq!(ds.num_items(), 6);
    }

    #[test]
    fn short_users_excluded_and_counted() {
        let mut r = history("a", &["x", "y"]);
        r.extend(history("b", &["x", "y", "z"]));
        let (ds, rep) = build_sequences(&r, 3).unwrap();
        assert_eq!(ds.num_users(), 1);
        assert_eq!(rep.excluded_short, 1);
        assert_eq!(rep.users_in, 2);
        assert!(build_sequences(&history("a", &["x", "y"]), 3).is_err());
    }

    #[test]
    fn first_appearance_indexing() {
        let mut r = history("a", &["q", "p", "q", "r"]);
        r.extend(history("b", &["s", "p", "t"]));
        let (ds, _) = build_sequences(&r, 5).unwrap();
        assert_eq!(ds.item_vocab, vec!["q", "p", "r", "s", "t"]);
        ds.validate().unwrap();
    }

    #[test]
    fn max_len_below_three_rejected() {
        assert!(build_sequences(&history("u", &["a", "b", "c"]), 2).is_err());
    }
}
