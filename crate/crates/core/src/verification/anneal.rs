use serde::{Deserialize, Serialize};

use super::mean_se;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{synth_markov_dataset, SequenceDataset};
use crate::encoder::{encode, Dropout};
use crate::error::{Error, Result};
use crate::eval::{evaluate, SplitKind};
use crate::generator::{latent_views, LatentNoise};
use crate::model::Model;
use crate::trainer::{train_epochs, training_loss, TrainState};

/// Data and training budget of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSetup {
    pub users: usize,
    pub items: usize,
    pub seq_len: usize,
    pub sharpness: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// `num_items`, `max_len`, `beta` and `seed` are overwritten per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealRow {
    pub beta: f64,
    pub ndcg10: f64,
    pub mean_sigma: f64,
    pub mean_kl: f64,
    pub mean_kl_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealReport {
    pub rows: Vec<AnnealRow>,
    /// Mean KL never rises by more than 2 SE between neighbouring β.
    pub pass: bool,
}

fn mean_sigma(model: &Model, ds: &SequenceDataset) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for u in 0..ds.num_users() {
        let h = encode(model, &ds.validation_input(u), &mut Dropout::off())?;
        let v = latent_views(model, &h, &mut LatentNoise::Zero)?;
        for (t, &ok) in h.valid.iter().enumerate() {
            if ok {
                sum += v.sigma.row(t).sum();
                count += v.sigma.ncols();
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains the model per β and seed on Markov data and reports the KL term,
/// posterior scale and validation NDCG@10 at the end of training.
pub fn check_kl_annealing_effect(betas: &[f64], setup: &AnnealSetup) -> Result<AnnealReport> {
    if betas.is_empty() || betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::Config("β grid must be non-empty and within [0, 1]".into()));
    }
    if setup.seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut sorted = betas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for &beta in &sorted {
        let (mut kls, mut sig, mut ndcg) = (Vec::new(), 0.0, 0.0);
        for &seed in &setup.seeds {
            let ds = synth_markov_dataset(setup.users, setup.items, setup.seq_len, setup.sharpness, seed)?;
            let mc = ModelConfig {
                num_items: ds.num_items(),
                max_len: ds.max_len,
                beta,
                seed,
                ..setup.model.clone()
            };
            let tc = TrainConfig {
                max_epochs: setup.epochs,
                patience: setup.epochs,
                seed,
                ..setup.train.clone()
            };
            let mut state = TrainState::new(mc, tc)?;
            train_epochs(&mut state, &ds, None, &mut |_| Ok(()))?;
            kls.push(training_loss(&state.model, &ds)?.l_kl1);
            sig += mean_sigma(&state.model, &ds)?;
            ndcg += evaluate(&state.model, &ds, SplitKind::Validation)?.ndcg_at(10);
        }
        let n = setup.seeds.len() as f64;
        let (mean_kl, mean_kl_se) = mean_se(&kls);
        rows.push(AnnealRow {
            beta,
            ndcg10: ndcg / n,
            mean_sigma: sig / n,
            mean_kl,
            mean_kl_se,
        });
    }
    let pass = rows
        .windows(2)
        .all(|w| w[1].mean_kl <= w[0].mean_kl + 2.0 * (w[0].mean_kl_se.powi(2) + w[1].mean_kl_se.powi(2)).sqrt());
    Ok(AnnealReport { rows, pass })
}
