//! Variational heads, twin latent views, the transformer decoder and the
//! full-catalog scoring head.

use rand_distr::{Distribution, StandardNormal};

use crate::config::{Pooling, ScoreFrom};
use crate::encoder::{self, BlockCtx, Dropout, HiddenStates};
use crate::error::{Error, Result};
use crate::model::{LayerVars, LinearIds, Model};
use crate::rng::{derive, Rng, Stream};
use crate::tape::{Mat, Tape, Var};

/// Mean, both standard deviations, both samples and the noise behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentViews {
    pub mu: Mat,
    pub sigma: Mat,
    pub sigma2: Mat,
    pub z: Mat,
    pub z2: Mat,
    pub eps: Mat,
    pub eps2: Mat,
}

/// Where the reparameterization noise comes from.
pub enum LatentNoise {
    /// `ε = ε′ = 0`: both views collapse to the mean.
    Zero,
    /// Independent draws for the first and second view.
    Sample(Rng, Rng),
}

impl LatentNoise {
    pub fn seeded(seed: u64, coords: &[u64]) -> Self {
        let mut a = coords.to_vec();
        a.push(0);
        let mut b = coords.to_vec();
        b.push(1);
        LatentNoise::Sample(derive(seed, Stream::Latent, &a), derive(seed, Stream::Latent, &b))
    }

    fn draw(&mut self, rows: usize, cols: usize) -> (Mat, Mat) {
        match self {
            LatentNoise::Zero => (Mat::zeros((rows, cols)), Mat::zeros((rows, cols))),
            LatentNoise::Sample(a, b) => (
                Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(a)),
                Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(b)),
            ),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, LatentNoise::Zero)
    }
}

/// Stochasticity of one forward pass.
pub struct ForwardMode {
    pub dropout: Dropout,
    pub noise: LatentNoise,
}

impl ForwardMode {
    /// No dropout, `ε = 0`.
    pub fn eval() -> Self {
        ForwardMode {
            dropout: Dropout::off(),
            noise: LatentNoise::Zero,
        }
    }

    /// Dropout at `rate` and sampled latent noise, both keyed on `coords`.
    pub fn train(rate: f64, seed: u64, coords: &[u64]) -> Self {
        ForwardMode {
            dropout: Dropout::new(rate, derive(seed, Stream::Dropout, coords)),
            noise: LatentNoise::seeded(seed, coords),
        }
    }
}

/// Tape handles of a batched twin forward pass.
pub struct TwinVars {
    pub ctx: BlockCtx,
    pub mu: Var,
    pub logvar: Var,
    pub logvar2: Var,
    pub z: Var,
    pub z2: Var,
    /// States the score head reads for each view.
    pub out1: Var,
    pub out2: Option<Var>,
    pub eps: Mat,
    pub eps2: Mat,
}

/// Which parts of the pass to build.
#[derive(Debug, Clone, Copy)]
pub struct TwinParts {
    /// Decode (or expose) the first view for scoring.
    pub score_first: bool,
    /// Decode (or expose) the second view for scoring.
    pub score_second: bool,
}

fn linear(tape: &mut Tape, model: &Model, x: Var, ids: &LinearIds) -> Var {
    let w = tape.param(&model.params, ids.weight);
    let b = tape.param(&model.params, ids.bias);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: &Mat, zero: bool) -> Var {
    if zero {
        return mu;
    }
    let sigma = tape.exp(logvar, 0.5);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e);
    tape.add(mu, noise)
}

/// Heads and reparameterization on top of encoder states `f`.
pub fn latent_on(
    tape: &mut Tape,
    model: &Model,
    f: Var,
    noise: &mut LatentNoise,
) -> (Var, Var, Var, Var, Var, Mat, Mat) {
    let mu = linear(tape, model, f, &model.ids.mu_head);
    let logvar = linear(tape, model, f, &model.ids.sigma_head);
    let logvar2 = linear(tape, model, f, &model.ids.sigma2_head);
    let (rows, cols) = tape.value(mu).dim();
    let zero = noise.is_zero();
    let (eps, eps2) = noise.draw(rows, cols);
    let z = reparameterize(tape, mu, logvar, &eps, zero);
    let z2 = reparameterize(tape, mu, logvar2, &eps2, zero);
    (mu, logvar, logvar2, z, z2, eps, eps2)
}

/// Positional embedding added to the latent rows, then the decoder blocks.
pub fn decode_on(tape: &mut Tape, model: &Model, z: Var, ctx: &BlockCtx, drop: &mut Dropout) -> Var {
    let pos = tape.param(&model.params, model.ids.position_embedding);
    let positions: Vec<usize> = (0..ctx.shape.batch).flat_map(|_| 0..ctx.shape.seq_len).collect();
    let p = tape.rows(pos, positions);
    let x = tape.add(z, p);
    let x = drop.apply(tape, x);
    let layers: Vec<LayerVars> = model.ids.decoder.iter().map(|l| l.load(tape, &model.params)).collect();
    encoder::stack_on(tape, x, &layers, ctx, drop)
}

/// Encoder, heads and (as requested) decoders for a batch of padded rows.
pub fn twin_on(
    tape: &mut Tape,
    model: &Model,
    seqs: &[Vec<u32>],
    mode: &mut ForwardMode,
    parts: TwinParts,
) -> Result<TwinVars> {
    let ctx = BlockCtx::new(seqs, model.config.num_heads, model.config.norm);
    let f = encoder::encode_on(tape, model, seqs, &ctx, &mut mode.dropout)?;
    let (mu, logvar, logvar2, z, z2, eps, eps2) = latent_on(tape, model, f, &mut mode.noise);
    let mut view = |tape: &mut Tape, z: Var, wanted: bool| -> Option<Var> {
        if !wanted {
            return None;
        }
        Some(match model.config.score_from {
            ScoreFrom::Decoder => decode_on(tape, model, z, &ctx, &mut mode.dropout),
            ScoreFrom::Latent => z,
        })
    };
    let out1 = view(tape, z, parts.score_first).unwrap_or(z);
    let out2 = view(tape, z2, parts.score_second);
    Ok(TwinVars {
        ctx,
        mu,
        logvar,
        logvar2,
        z,
        z2,
        out1,
        out2,
        eps,
        eps2,
    })
}

/// Row index of the last position of each stacked sequence.
pub fn anchor_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq_len + seq_len - 1).collect()
}

/// One summary row per sequence for the contrastive term.
pub fn pool_on(tape: &mut Tape, x: Var, ctx: &BlockCtx, pooling: Pooling) -> Var {
    let (b, t) = (ctx.shape.batch, ctx.shape.seq_len);
    match pooling {
        Pooling::Anchor => tape.rows(x, anchor_rows(b, t)),
        Pooling::Mean => {
            let mut w = Mat::zeros((b, b * t));
            for s in 0..b {
                let valid = &ctx.key_valid[s * t..(s + 1) * t];
                let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
                for (j, &v) in valid.iter().enumerate() {
                    if v {
                        w[[s, s * t + j]] = 1.0 / n;
                    }
                }
            }
            let w = tape.constant(w);
            tape.matmul(w, x)
        }
    }
}

/// Scores of items `1..=N` for the selected rows of `h`.
pub fn scores_on(tape: &mut Tape, model: &Model, h: Var, rows: Vec<usize>) -> Var {
    let table = tape.param(&model.params, model.ids.item_embedding);
    let items = tape.rows(table, (1..=model.num_items()).collect());
    let sel = tape.rows(h, rows);
    tape.matmul_bt(sel, items)
}

/// Computes `(μ, σ, σ′, z, z′)` for one sequence's encoder states.
pub fn latent_views(model: &Model, f: &HiddenStates, noise: &mut LatentNoise) -> Result<LatentViews> {
    if f.states.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder states".into()));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.states.clone());
    let (mu, lv, lv2, z, z2, eps, eps2) = latent_on(&mut tape, model, fv, noise);
    for (name, v) in [("Enc_mu", mu), ("Enc_sigma", lv), ("Enc_sigma2", lv2)] {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let sigma = tape.value(lv).mapv(|x| (0.5 * x).exp());
    let sigma2 = tape.value(lv2).mapv(|x| (0.5 * x).exp());
    for (name, s) in [("Enc_sigma", &sigma), ("Enc_sigma2", &sigma2)] {
        if s.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LatentViews {
        mu: tape.value(mu).clone(),
        sigma,
        sigma2,
        z: tape.value(z).clone(),
        z2: tape.value(z2).clone(),
        eps,
        eps2,
    })
}

/// Runs the decoder over one sequence's latent rows.
pub fn decode(model: &Model, z: &Mat, valid: &[bool], drop: &mut Dropout) -> Result<HiddenStates> {
    let t = model.config.max_len;
    if z.dim() != (t, model.config.hidden_dim) || valid.len() != t {
        return Err(Error::Shape(format!("latent {:?} for max_len {t}", z.dim())));
    }
    let seqs = [valid.iter().map(|&v| u32::from(v)).collect::<Vec<_>>()];
    let ctx = BlockCtx::new(&seqs, model.config.num_heads, model.config.norm);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = decode_on(&mut tape, model, zv, &ctx, drop);
    Ok(HiddenStates {
        states: tape.value(out).clone(),
        valid: valid.to_vec(),
    })
}

/// `ŷ[v] = ⟨states[anchor], M[v]⟩` for `v = 1..=N`; `ŷ[v-1]` is item `v`.
pub fn score_items(out: &HiddenStates, anchor: usize, item_table: &Mat) -> Result<Vec<f64>> {
    if anchor >= out.valid.len() {
        return Err(Error::OutOfRange {
            index: anchor,
            max: out.valid.len() - 1,
        });
    }
    if !out.valid[anchor] {
        return Err(Error::Contract(format!("anchor position {anchor} is padding")));
    }
    if item_table.ncols() != out.states.ncols() {
        return Err(Error::Shape("item table width differs from state width".into()));
    }
    let a = out.states.row(anchor);
    Ok(item_table.rows().into_iter().skip(1).map(|r| r.dot(&a)).collect())
}

/// Output of [`forward_twin`] for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinOutput {
    pub views: LatentViews,
    pub scores: Vec<f64>,
    pub scores2: Vec<f64>,
    pub z_u: Vec<f64>,
    pub z2_u: Vec<f64>,
}

/// One encoder pass, one latent draw, two decoder passes, two score vectors.
pub fn forward_twin(model: &Model, seq: &[u32], mode: &mut ForwardMode) -> Result<TwinOutput> {
    let t = model.config.max_len;
    if seq.last().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("sequence has no item at the anchor position".into()));
    }
    let seqs = [seq.to_vec()];
    let mut tape = Tape::new();
    let parts = TwinParts {
        score_first: true,
        score_second: true,
    };
    let tv = twin_on(&mut tape, model, &seqs, mode, parts)?;
    let anchor = vec![t - 1];
    let s1 = scores_on(&mut tape, model, tv.out1, anchor.clone());
    let s2 = scores_on(&mut tape, model, tv.out2.expect("second view requested"), anchor);
    let zu = pool_on(&mut tape, tv.z, &tv.ctx, model.config.pooling);
    let z2u = pool_on(&mut tape, tv.z2, &tv.ctx, model.config.pooling);
    let views = LatentViews {
        mu: tape.value(tv.mu).clone(),
        sigma: tape.value(tv.logvar).mapv(|x| (0.5 * x).exp()),
        sigma2: tape.value(tv.logvar2).mapv(|x| (0.5 * x).exp()),
        z: tape.value(tv.z).clone(),
        z2: tape.value(tv.z2).clone(),
        eps: tv.eps,
        eps2: tv.eps2,
    };
    Ok(TwinOutput {
        views,
        scores: tape.value(s1).iter().copied().collect(),
        scores2: tape.value(s2).iter().copied().collect(),
        z_u: tape.value(zu).iter().copied().collect(),
        z2_u: tape.value(z2u).iter().copied().collect(),
    })
}

/// Deterministic full-catalog scores (ε = 0, no dropout) of each row's
/// last position; row `b` of the result scores items `1..=N`.
pub fn predict_scores(model: &Model, seqs: &[Vec<u32>]) -> Result<Mat> {
    let mut tape = Tape::new();
    let mut mode = ForwardMode::eval();
    let parts = TwinParts {
        score_first: true,
        score_second: false,
    };
    let tv = twin_on(&mut tape, model, seqs, &mut mode, parts)?;
    let anchors = anchor_rows(seqs.len(), model.config.max_len);
    let s = scores_on(&mut tape, model, tv.out1, anchors);
    Ok(tape.value(s).clone())
}
