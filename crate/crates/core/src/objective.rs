//! Batch-level assembly of the training objective on a tape.

use crate::error::{Error, Result};
use crate::generator::{self, ForwardMode, TwinParts};
use crate::losses::{self, LossParts};
use crate::model::Model;
use crate::tape::{Tape, Var};

/// Padded input rows and their aligned next-item targets (0 = no target).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn target_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for (b, tgt) in self.targets.iter().enumerate() {
            for (t, &v) in tgt.iter().enumerate() {
                if v != 0 {
                    rows.push(b * tgt.len() + t);
                    cols.push(v as usize - 1);
                }
            }
        }
        (rows, cols)
    }
}

/// Scalar handles of every term plus the weighted total.
pub struct ObjectiveVars {
    pub total: Var,
    pub l_rs1: Var,
    pub l_rs2: Option<Var>,
    pub l_kl1: Var,
    pub l_kl2: Option<Var>,
    pub l_cl: Option<Var>,
}

impl ObjectiveVars {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossParts {
            l_rs1: tape.scalar(self.l_rs1),
            l_rs2: get(self.l_rs2),
            l_kl1: tape.scalar(self.l_kl1),
            l_kl2: get(self.l_kl2),
            l_cl: get(self.l_cl),
        }
    }
}

/// Reconstruction (both views), KL (both views) and InfoNCE over a batch.
///
/// Reconstruction is the mean cross-entropy over every position that has a
/// next-item target; KL is summed over latent dimensions and averaged over
/// non-padded positions. The contrastive term needs at least two rows and
/// the twin branch enabled.
pub fn objective_on(
    tape: &mut Tape,
    model: &Model,
    batch: &TrainBatch,
    mode: &mut ForwardMode,
) -> Result<ObjectiveVars> {
    let cfg = &model.config;
    let (rows, cols) = batch.target_rows();
    if rows.is_empty() {
        return Err(Error::Contract("batch has no next-item targets".into()));
    }
    let parts = TwinParts {
        score_first: true,
        score_second: cfg.twin,
    };
    let tv = generator::twin_on(tape, model, &batch.inputs, mode, parts)?;
    let s1 = generator::scores_on(tape, model, tv.out1, rows.clone());
    let l_rs1 = tape.cross_entropy(s1, cols.clone());
    let weights = losses::row_weights(&tv.ctx.key_valid);
    let l_kl1 = tape.gaussian_kl(tv.mu, tv.logvar, weights.clone());

    let (mut l_rs2, mut l_kl2, mut l_cl) = (None, None, None);
    if cfg.twin {
        let s2 = generator::scores_on(tape, model, tv.out2.expect("second view built"), rows);
        l_rs2 = Some(tape.cross_entropy(s2, cols));
        l_kl2 = Some(tape.gaussian_kl(tv.mu, tv.logvar2, weights));
        if batch.len() >= 2 {
            let a = generator::pool_on(tape, tv.z, &tv.ctx, cfg.pooling);
            let b = generator::pool_on(tape, tv.z2, &tv.ctx, cfg.pooling);
            l_cl = Some(tape.info_nce(a, b, cfg.tau, cfg.similarity));
        }
    }
    let mut terms = vec![(l_rs1, 1.0), (l_kl1, cfg.beta)];
    terms.extend(l_rs2.map(|v| (v, 1.0)));
    terms.extend(l_kl2.map(|v| (v, cfg.beta)));
    terms.extend(l_cl.map(|v| (v, cfg.alpha)));
    let total = tape.weighted_sum(terms);
    Ok(ObjectiveVars {
        total,
        l_rs1,
        l_rs2,
        l_kl1,
        l_kl2,
        l_cl,
    })
}

/// `α · InfoNCE(z, z′)` from a fresh encoder pass (no decoding).
pub fn contrastive_on(tape: &mut Tape, model: &Model, inputs: &[Vec<u32>], mode: &mut ForwardMode) -> Result<Var> {
    if inputs.len() < 2 {
        return Err(Error::Contract("contrastive stage needs at least two sequences".into()));
    }
    let parts = TwinParts {
        score_first: false,
        score_second: false,
    };
    let cfg = &model.config;
    let tv = generator::twin_on(tape, model, inputs, mode, parts)?;
    let a = generator::pool_on(tape, tv.z, &tv.ctx, cfg.pooling);
    let b = generator::pool_on(tape, tv.z2, &tv.ctx, cfg.pooling);
    let l = tape.info_nce(a, b, cfg.tau, cfg.similarity);
    Ok(tape.scale(l, cfg.alpha))
}
