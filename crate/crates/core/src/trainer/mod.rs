//! Optimization loop: two-stage meta updates, the joint baseline, early
//! stopping on validation NDCG@10 and resumable state.

mod adam;
mod checkpoint;
mod log;

use rand::seq::SliceRandom;

pub use adam::Adam;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use log::{EpochRecord, LogRecord};

use crate::config::{ModelConfig, Stage2Granularity, TrainConfig, TrainMode};
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, SplitKind};
use crate::generator::ForwardMode;
use crate::losses::{total_loss, LossBreakdown};
use crate::model::Model;
use crate::objective::{contrastive_on, objective_on, TrainBatch};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::{derive, Stream};
use crate::tape::Tape;

/// Everything needed to continue a run bit-for-bit.
///
/// Randomness is keyed on (seed, epoch, batch), so no generator state is
/// carried.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches over the whole run.
    pub step: u64,
    pub best_ndcg10: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub best_params: Option<ParamStore>,
    pub finished: bool,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Self {
        let adam = Adam::new(&model.params, config.lr);
        TrainState {
            model,
            config,
            adam,
            epoch: 0,
            step: 0,
            best_ndcg10: None,
            best_epoch: None,
            bad_epochs: 0,
            best_params: None,
            finished: false,
        }
    }

    /// The model with the best validation parameters seen so far.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.params = p.clone();
        }
        m
    }

    fn require(&self, mode: TrainMode) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::Contract(format!(
                "step requires {mode:?} mode, state is {:?}",
                self.config.mode
            )));
        }
        Ok(())
    }

    fn full_objective(
        &mut self,
        batch: &TrainBatch,
        mode: &mut ForwardMode,
        groups: &[ParamGroup],
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = objective_on(&mut tape, &self.model, batch, mode)?;
        let cfg = &self.model.config;
        let breakdown = total_loss(vars.parts(&tape), cfg.alpha, cfg.beta, cfg.tau)?;
        let grads = tape.backward(vars.total);
        let pg = tape.param_grads(&grads);
        self.adam
            .step(&mut self.model.params, &pg, groups, self.config.precision)?;
        self.model.zero_padding_row();
        Ok(breakdown)
    }

    /// Updates everything except the second variance head under the full
    /// objective; that head acts as a constant.
    pub fn stage1_step(&mut self, batch: &TrainBatch, mode: &mut ForwardMode) -> Result<LossBreakdown> {
        self.require(TrainMode::MetaTwoStep)?;
        self.full_objective(batch, mode, &[ParamGroup::Main])
    }

    /// Re-encodes `inputs` with the current parameters and updates only the
    /// second variance head under `α · InfoNCE`. Returns that loss.
    pub fn stage2_step(&mut self, inputs: &[Vec<u32>], mode: &mut ForwardMode) -> Result<f64> {
        self.require(TrainMode::MetaTwoStep)?;
        let mut tape = Tape::new();
        let l = contrastive_on(&mut tape, &self.model, inputs, mode)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(Error::NonFinite("contrastive loss".into()));
        }
        let grads = tape.backward(l);
        let pg = tape.param_grads(&grads);
        self.adam.step(
            &mut self.model.params,
            &pg,
            &[ParamGroup::SigmaPrime],
            self.config.precision,
        )?;
        Ok(value)
    }

    /// One update of every parameter under the full objective.
    pub fn joint_step(&mut self, batch: &TrainBatch, mode: &mut ForwardMode) -> Result<LossBreakdown> {
        self.require(TrainMode::Joint)?;
        self.full_objective(batch, mode, &[ParamGroup::Main, ParamGroup::SigmaPrime])
    }

    fn stage2_active(&self) -> bool {
        let c = &self.model.config;
        self.config.mode == TrainMode::MetaTwoStep && c.twin && c.alpha != 0.0
    }

    /// Runs one epoch (training, then validation) and appends its records.
    pub fn run_epoch(
        &mut self,
        ds: &SequenceDataset,
        pairs: &[(Vec<u32>, Vec<u32>)],
        log: &mut dyn FnMut(LogRecord) -> Result<()>,
    ) -> Result<()> {
        let e = self.epoch as u64;
        let seed = self.config.seed;
        let rate = self.model.config.dropout;
        let batches = epoch_batches(pairs.len(), self.config.batch_size, seed, e);
        let mut total_sum = 0.0;
        let mut made = Vec::with_capacity(batches.len());
        for (b, idx) in batches.iter().enumerate() {
            let batch = TrainBatch {
                inputs: idx.iter().map(|&i| pairs[i].0.clone()).collect(),
                targets: idx.iter().map(|&i| pairs[i].1.clone()).collect(),
            };
            let coords = [e, b as u64, 1];
            let mut mode = ForwardMode::train(rate, seed, &coords);
            let step = self.step;
            let loss = match self.config.mode {
                TrainMode::MetaTwoStep => {
                    let l = self.stage1_step(&batch, &mut mode)?;
                    log(LogRecord::Stage1 {
                        epoch: e as usize,
                        step,
                        loss: l,
                    })?;
                    l
                }
                TrainMode::Joint => {
                    let l = self.joint_step(&batch, &mut mode)?;
                    log(LogRecord::Joint {
                        epoch: e as usize,
                        step,
                        loss: l,
                    })?;
                    l
                }
            };
            total_sum += loss.total;
            if self.stage2_active() && self.config.stage2 == Stage2Granularity::PerBatch && batch.len() >= 2 {
                let mut mode = ForwardMode::train(rate, seed, &[e, b as u64, 2]);
                let lp = self.stage2_step(&batch.inputs, &mut mode)?;
                log(LogRecord::Stage2 {
                    epoch: e as usize,
                    step,
                    l_prime: lp,
                })?;
            }
            self.step += 1;
            made.push(batch);
        }
        if self.stage2_active() && self.config.stage2 == Stage2Granularity::PerEpoch {
            for (b, batch) in made.iter().enumerate().filter(|(_, b)| b.len() >= 2) {
                let mut mode = ForwardMode::train(rate, seed, &[e, b as u64, 2]);
                let lp = self.stage2_step(&batch.inputs, &mut mode)?;
                log(LogRecord::Stage2 {
                    epoch: e as usize,
                    step: self.step,
                    l_prime: lp,
                })?;
            }
        }

        let report = evaluate(&self.model, ds, SplitKind::Validation)?;
        let ndcg10 = report.ndcg_at(10);
        let improved = self.best_ndcg10.is_none_or(|b| ndcg10 > b);
        if improved {
            self.best_ndcg10 = Some(ndcg10);
            self.best_epoch = Some(self.epoch);
            self.best_params = Some(self.model.params.clone());
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.epoch += 1;
        if self.bad_epochs >= self.config.patience || self.epoch >= self.config.max_epochs {
            self.finished = true;
        }
        log(LogRecord::Epoch(EpochRecord {
            epoch: e as usize,
            mean_total: total_sum / batches.len() as f64,
            hr5: report.hr_at(5),
            hr10: report.hr_at(10),
            ndcg5: report.ndcg_at(5),
            ndcg10,
            improved,
            best_ndcg10: self.best_ndcg10.unwrap_or(ndcg10),
            bad_epochs: self.bad_epochs,
        }))
    }
}

/// Shuffled mini-batches of `0..n`; a trailing batch of one joins its
/// predecessor so every batch has in-batch negatives.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, Stream::Shuffle, &[epoch]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Next-item training pairs of every user whose prefix has two or more items.
pub fn training_pairs(ds: &SequenceDataset) -> Vec<(Vec<u32>, Vec<u32>)> {
    (0..ds.num_users()).filter_map(|u| ds.training_pair(u)).collect()
}

fn check_compat(model: &ModelConfig, ds: &SequenceDataset) -> Result<()> {
    if model.num_items != ds.num_items() {
        return Err(Error::VocabMismatch {
            model: model.num_items,
            dataset: ds.num_items(),
        });
    }
    if model.max_len != ds.max_len {
        return Err(Error::Config(format!(
            "model max_len {} != dataset max_len {}",
            model.max_len, ds.max_len
        )));
    }
    Ok(())
}

/// Continues `state` until it finishes or `epochs` more epochs have run.
pub fn train_epochs(
    state: &mut TrainState,
    ds: &SequenceDataset,
    epochs: Option<usize>,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
) -> Result<()> {
    check_compat(&state.model.config, ds)?;
    let pairs = training_pairs(ds);
    if pairs.is_empty() {
        return Err(Error::Contract("no user has a training pair".into()));
    }
    let mut ran = 0;
    while !state.finished && epochs.is_none_or(|n| ran < n) {
        state.run_epoch(ds, &pairs, log)?;
        ran += 1;
    }
    Ok(())
}

/// Trains from scratch to completion and returns the final state and log.
pub fn fit(
    ds: &SequenceDataset,
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<(TrainState, Vec<LogRecord>)> {
    check_compat(&model_config, ds)?;
    let mut state = TrainState::new(model_config, config)?;
    let mut records = Vec::new();
    train_epochs(&mut state, ds, None, &mut |r| {
        records.push(r);
        Ok(())
    })?;
    Ok((state, records))
}

/// Mean deterministic (ε = 0, no dropout) objective over all training pairs.
pub fn training_loss(model: &Model, ds: &SequenceDataset) -> Result<LossBreakdown> {
    let pairs = training_pairs(ds);
    if pairs.is_empty() {
        return Err(Error::Contract("no user has a training pair".into()));
    }
    let batch = TrainBatch {
        inputs: pairs.iter().map(|p| p.0.clone()).collect(),
        targets: pairs.iter().map(|p| p.1.clone()).collect(),
    };
    let mut tape = Tape::new();
    let vars = objective_on(&mut tape, model, &batch, &mut ForwardMode::eval())?;
    let c = &model.config;
    total_loss(vars.parts(&tape), c.alpha, c.beta, c.tau)
}
