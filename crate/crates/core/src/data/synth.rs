use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::sequences::{left_pad, SequenceDataset, Split};
use crate::error::{Error, Result};
use crate::rng::{derive, Rng, Stream};

/// First-order chain over item indices `1..=N` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub initial: Vec<f64>,
    /// Row-stochastic, `transition[i][j] = P(next = j+1 | current = i+1)`.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn num_items(&self) -> usize {
        self.initial.len()
    }

    /// Next-item distribution after item index `prev` (1-based).
    pub fn next_probs(&self, prev: u32) -> &[f64] {
        &self.transition[prev as usize - 1]
    }

    /// Most likely successor of `prev`, lowest index on ties.
    pub fn predict(&self, prev: u32) -> u32 {
        let row = self.next_probs(prev);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best as u32 + 1
    }

    /// Expected HR@1 of the Bayes predictor averaged over the given last items.
    pub fn bayes_hr1(&self, prevs: &[u32]) -> f64 {
        let hit: f64 = prevs
            .iter()
            .map(|&p| {
                let row = self.next_probs(p);
                row[self.predict(p) as usize - 1]
            })
            .sum();
        hit / prevs.len().max(1) as f64
    }

    fn sample_path(&self, len: usize, rng: &mut Rng) -> Vec<u32> {
        let init = WeightedIndex::new(&self.initial).expect("valid initial distribution");
        let mut cur = init.sample(rng);
        let mut path = vec![cur as u32 + 1];
        while path.len() < len {
            let row = WeightedIndex::new(&self.transition[cur]).expect("valid transition row");
            cur = row.sample(rng);
            path.push(cur as u32 + 1);
        }
        path
    }
}

/// Chain whose item `i` moves to `succ[i]` with logit `sharpness` above
/// every other item.
fn peaked_chain(succ: &[usize], sharpness: f64) -> MarkovChain {
    let n = succ.len();
    let transition = succ
        .iter()
        .map(|&s| {
            if sharpness.is_infinite() {
                (0..n).map(|j| if j == s { 1.0 } else { 0.0 }).collect()
            } else {
                let peak = sharpness.exp();
                let z = peak + (n - 1) as f64;
                (0..n).map(|j| if j == s { peak / z } else { 1.0 / z }).collect()
            }
        })
        .collect();
    MarkovChain {
        initial: vec![1.0 / n as f64; n],
        transition,
    }
}

fn random_cycle(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut succ = vec![0; n];
    for k in 0..n {
        succ[order[k]] = order[(k + 1) % n];
    }
    succ
}

fn check_args(num_users: usize, num_items: usize, seq_len: usize, sharpness: f64) -> Result<()> {
    if num_users == 0 {
        return Err(Error::Config("num_users must be positive".into()));
    }
    if num_items < 5 {
        return Err(Error::Config(format!("num_items must be >= 5, got {num_items}")));
    }
    if seq_len < 3 {
        return Err(Error::Config(format!("seq_len must be >= 3, got {seq_len}")));
    }
    if sharpness.is_nan() || sharpness < 0.0 {
        return Err(Error::Config(format!("sharpness must be >= 0, got {sharpness}")));
    }
    Ok(())
}

fn assemble(paths: Vec<Vec<u32>>, num_items: usize, seq_len: usize, markov: Option<MarkovChain>) -> SequenceDataset {
    let max_len = (seq_len - 2).max(3);
    let mut ds = SequenceDataset {
        max_len,
        users: (0..paths.len()).map(|u| format!("u{u}")).collect(),
        item_vocab: (1..=num_items).map(|i| i.to_string()).collect(),
        sequences: Vec::with_capacity(paths.len()),
        lengths: Vec::with_capacity(paths.len()),
        splits: Vec::with_capacity(paths.len()),
        markov,
    };
    for p in paths {
        let n = p.len();
        ds.sequences.push(left_pad(&p[..n - 2], max_len));
        ds.lengths.push(n - 2);
        ds.splits.push(Split {
            valid_target: p[n - 2],
            test_target: p[n - 1],
        });
    }
    ds
}

/// Users walk one shared chain for `seq_len` steps; item `k` is named `"k"`.
///
/// The successor structure is a random cycle, so an infinite sharpness gives
/// a deterministic tour and zero gives uniform transitions.
pub fn synth_markov_dataset(
    num_users: usize,
    num_items: usize,
    seq_len: usize,
    sharpness: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    check_args(num_users, num_items, seq_len, sharpness)?;
    let mut rng = derive(seed, Stream::Synth, &[0]);
    let chain = peaked_chain(&random_cycle(num_items, &mut rng), sharpness);
    let paths = (0..num_users)
        .map(|u| chain.sample_path(seq_len, &mut derive(seed, Stream::Synth, &[1, u as u64])))
        .collect();
    Ok(assemble(paths, num_items, seq_len, Some(chain)))
}

/// Users split into `num_prefs` latent groups, each walking its own chain.
///
/// The same item has a different likely successor in each group, so the
/// next item depends on the user's history beyond the last click.
pub fn synth_preference_dataset(
    num_users: usize,
    num_items: usize,
    seq_len: usize,
    num_prefs: usize,
    sharpness: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    check_args(num_users, num_items, seq_len, sharpness)?;
    if num_prefs == 0 {
        return Err(Error::Config("num_prefs must be positive".into()));
    }
    let mut rng = derive(seed, Stream::Synth, &[0]);
    let chains: Vec<MarkovChain> = (0..num_prefs)
        .map(|_| peaked_chain(&random_cycle(num_items, &mut rng), sharpness))
        .collect();
    let paths = (0..num_users)
        .map(|u| {
            let mut r = derive(seed, Stream::Synth, &[1, u as u64]);
            let g = r.random_range(0..num_prefs);
            chains[g].sample_path(seq_len, &mut r)
        })
        .collect();
    let markov = if num_prefs == 1 {
        chains.into_iter().next()
    } else {
        None
    };
    Ok(assemble(paths, num_items, seq_len, markov))
}
