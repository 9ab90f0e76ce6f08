use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sequences::{left_pad, SequenceDataset};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub inserted: usize,
    /// Users whose history covers every item.
    pub skipped_users: Vec<usize>,
}

/// Inserts `floor(ratio * L)` foreign items into every training prefix.
///
/// Noise items are drawn uniformly (with replacement) from items absent from
/// the user's full history and inserted at uniform positions; the grown
/// prefix is re-truncated from the left. Held-out targets are untouched.
pub fn inject_noise(ds: &SequenceDataset, spec: NoiseSpec) -> Result<(SequenceDataset, NoiseReport)> {
    if !(0.0..=0.5).contains(&spec.ratio) {
        return Err(Error::Config(format!("noise ratio {} outside [0, 0.5]", spec.ratio)));
    }
    let n = ds.num_items() as u32;
    let mut out = ds.clone();
    let mut report = NoiseReport::default();
    for u in 0..ds.num_users() {
        let items = ds.train_items(u);
        let k = (spec.ratio * items.len() as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut seen: HashSet<u32> = items.iter().copied().collect();
        seen.insert(ds.splits[u].valid_target);
        seen.insert(ds.splits[u].test_target);
        let pool: Vec<u32> = (1..=n).filter(|v| !seen.contains(v)).collect();
        if pool.is_empty() {
            log::warn!("user {} has interacted with every item; no noise injected", ds.users[u]);
            report.skipped_users.push(u);
            continue;
        }
        let mut rng = derive(spec.seed, Stream::Noise, &[u as u64]);
        let mut grown = items.to_vec();
        for _ in 0..k {
            let v = pool[rng.random_range(0..pool.len())];
            let at = rng.random_range(0..=grown.len());
            grown.insert(at, v);
        }
        report.inserted += k;
        let row = left_pad(&grown, ds.max_len);
        out.lengths[u] = grown.len().min(ds.max_len);
        out.sequences[u] = row;
    }
    Ok((out, report))
}
