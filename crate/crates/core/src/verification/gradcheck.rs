use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::generator::{ForwardMode, LatentNoise};
use crate::model::Model;
use crate::objective::{contrastive_on, objective_on, TrainBatch};
use crate::params::{ParamGroup, ParamId};
use crate::rng::{derive, Stream};
use crate::tape::{Tape, Var};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Minimum number of scalars compared.
const MIN_SCALARS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `name[row, col]` of the worst scalar.
    pub worst: String,
    pub checked: usize,
    pub families: Vec<String>,
}

fn toy_batch(cfg: &ModelConfig, seed: u64) -> TrainBatch {
    let mut rng = derive(seed, Stream::Verify, &[0x6C]);
    let t = cfg.max_len;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for b in 0..3 {
        let len = (t - b).max(2);
        let items: Vec<u32> = (0..=len).map(|_| rng.random_range(1..=cfg.num_items as u32)).collect();
        let mut input = vec![0; t - len];
        input.extend_from_slice(&items[..len]);
        let mut target = vec![0; t - len];
        target.extend_from_slice(&items[1..]);
        inputs.push(input);
        targets.push(target);
    }
    TrainBatch { inputs, targets }
}

fn frozen_mode(seed: u64) -> ForwardMode {
    ForwardMode {
        dropout: Dropout::off(),
        noise: LatentNoise::seeded(seed, &[0x6C]),
    }
}

fn check<F>(model: &mut Model, seed: u64, groups: &[ParamGroup], loss: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &Model) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, model)?;
    let grads = tape.backward(out);
    let analytic: BTreeMap<ParamId, _> = tape.param_grads(&grads).into_iter().collect();

    let mut by_family: BTreeMap<String, Vec<(ParamId, usize, usize)>> = BTreeMap::new();
    for id in model
        .params
        .ids()
        .filter(|&id| groups.contains(&model.params.group(id)))
    {
        let (r, c) = model.params.value(id).dim();
        let fam = by_family.entry(model.family(id)).or_default();
        for i in 0..r {
            for j in 0..c {
                fam.push((id, i, j));
            }
        }
    }
    let per_family = MIN_SCALARS.div_ceil(by_family.len().max(1)) + 1;
    let mut rng = derive(seed, Stream::Verify, &[0x6D]);
    let mut picks = Vec::new();
    for cands in by_family.values_mut() {
        cands.shuffle(&mut rng);
        picks.extend(cands.iter().take(per_family).copied());
    }

    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, m)?;
        Ok(t.scalar(v))
    };
    let mut worst = (0.0f64, String::new());
    for &(id, i, j) in &picks {
        let x = model.params.value(id)[[i, j]];
        model.params.value_mut(id)[[i, j]] = x + GRADCHECK_STEP;
        let up = eval(model)?;
        model.params.value_mut(id)[[i, j]] = x - GRADCHECK_STEP;
        let down = eval(model)?;
        model.params.value_mut(id)[[i, j]] = x;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let a = analytic.get(&id).map_or(0.0, |g| g[[i, j]]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {}[{i}, {j}]",
                model.params.name(id)
            )));
        }
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{}[{i}, {j}]", model.params.name(id)));
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked: picks.len(),
        families: by_family.keys().cloned().collect(),
    })
}

/// Compares tape gradients of the full objective with central differences
/// on a sample of scalars from every parameter family. Dropout is off and
/// the latent noise is frozen.
pub fn gradcheck_model(config: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut model = Model::new(cfg.clone())?;
    let batch = toy_batch(&cfg, seed);
    check(
        &mut model,
        seed,
        &[ParamGroup::Main, ParamGroup::SigmaPrime],
        |tape, m| Ok(objective_on(tape, m, &batch, &mut frozen_mode(seed))?.total),
    )
}

/// Same check for the contrastive stage against the second variance head.
pub fn gradcheck_contrastive(config: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut model = Model::new(cfg.clone())?;
    let batch = toy_batch(&cfg, seed);
    check(&mut model, seed, &[ParamGroup::SigmaPrime], |tape, m| {
        contrastive_on(tape, m, &batch.inputs, &mut frozen_mode(seed))
    })
}
