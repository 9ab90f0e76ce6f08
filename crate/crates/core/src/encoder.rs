//! Item + position embedding and stacked causal self-attention blocks.
//!
//! The tape-level functions (`*_on`) take a batch of `B` sequences stacked
//! into `(B·max_len) × d` matrices; the value-level wrappers run a single
//! sequence through the same code.

use rand::Rng as _;

use crate::config::NormPlacement;
use crate::error::{Error, Result};
use crate::model::{LayerParams, LayerVars, Model};
use crate::rng::Rng;
use crate::tape::{AttnShape, Mat, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Contextual states of a sequence plus its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// `max_len × d`
    pub states: Mat,
    /// `true` at non-padded positions.
    pub valid: Vec<bool>,
}

/// Source of inverted-dropout masks. A zero rate or missing generator
/// disables dropout.
pub struct Dropout {
    rate: f64,
    rng: Option<Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<Mat> {
        if !self.active() {
            return None;
        }
        let keep = 1.0 - self.rate;
        let rng = self.rng.as_mut().unwrap();
        Some(Mat::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    pub(crate) fn flat_mask(&mut self, len: usize) -> Option<Vec<f64>> {
        self.mask(1, len).map(|m| m.into_raw_vec_and_offset().0)
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let (r, c) = tape.value(x).dim();
        match self.mask(r, c) {
            Some(m) => tape.dropout(x, m),
            None => x,
        }
    }
}

/// Geometry shared by every block of one forward pass.
#[derive(Debug, Clone)]
pub struct BlockCtx {
    pub shape: AttnShape,
    pub key_valid: Vec<bool>,
    pub norm: NormPlacement,
}

impl BlockCtx {
    pub fn new(seqs: &[Vec<u32>], heads: usize, norm: NormPlacement) -> Self {
        let seq_len = seqs.first().map_or(0, Vec::len);
        BlockCtx {
            shape: AttnShape {
                batch: seqs.len(),
                seq_len,
                heads,
            },
            key_valid: seqs.iter().flat_map(|s| s.iter().map(|&i| i != 0)).collect(),
            norm,
        }
    }
}

pub(crate) fn check_indices(seqs: &[Vec<u32>], num_items: usize, max_len: usize) -> Result<()> {
    for s in seqs {
        if s.len() != max_len {
            return Err(Error::Shape(format!(
                "sequence of length {} but max_len {max_len}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&i| i as usize > num_items) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                max: num_items,
            });
        }
    }
    Ok(())
}

/// `Ê[t] = M[seq[t]] + P[t]` for every stacked sequence, then dropout.
pub fn embed_on(tape: &mut Tape, model: &Model, seqs: &[Vec<u32>], drop: &mut Dropout) -> Result<Var> {
    check_indices(seqs, model.num_items(), model.config.max_len)?;
    let t = model.config.max_len;
    let items: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
    let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();
    let table = tape.param(&model.params, model.ids.item_embedding);
    let pos = tape.param(&model.params, model.ids.position_embedding);
    let e = tape.rows(table, items);
    let p = tape.rows(pos, positions);
    let sum = tape.add(e, p);
    Ok(drop.apply(tape, sum))
}

/// One attention head over a single sequence (`seq_len × d/h` projections).
pub fn attention_head(e: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, key_valid: &[bool]) -> Result<Mat> {
    if wq.dim() != wk.dim() || wq.dim() != wv.dim() || wq.nrows() != e.ncols() {
        return Err(Error::Shape("projection shapes disagree".into()));
    }
    if key_valid.len() != e.nrows() {
        return Err(Error::Shape("mask length differs from sequence length".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(e.clone());
    let (wq, wk, wv) = (
        tape.constant(wq.clone()),
        tape.constant(wk.clone()),
        tape.constant(wv.clone()),
    );
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let shape = AttnShape {
        batch: 1,
        seq_len: e.nrows(),
        heads: 1,
    };
    let h = tape.causal_attention(q, k, v, shape, key_valid.to_vec(), None);
    Ok(tape.value(h).clone())
}

fn multi_head(tape: &mut Tape, x: Var, layer: &LayerVars, ctx: &BlockCtx, drop: &mut Dropout) -> Var {
    let q = tape.matmul(x, layer.wq);
    let k = tape.matmul(x, layer.wk);
    let v = tape.matmul(x, layer.wv);
    let s = ctx.shape;
    let mask = drop.flat_mask(s.batch * s.heads * s.seq_len * s.seq_len);
    tape.causal_attention(q, k, v, s, ctx.key_valid.clone(), mask)
}

fn ffn(tape: &mut Tape, x: Var, layer: &LayerVars) -> Var {
    let h = tape.matmul(x, layer.w1);
    let h = tape.add_row(h, layer.b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, layer.w2);
    tape.add_row(h, layer.b2)
}

/// `O = Concat(heads)`, `F = ReLU(O W1 + b1) W2 + b2 + O`, with layer norm
/// placed per `ctx.norm` and dropout on attention weights and FFN output.
pub fn san_block_on(tape: &mut Tape, x: Var, layer: &LayerVars, ctx: &BlockCtx, drop: &mut Dropout) -> Var {
    match ctx.norm {
        NormPlacement::Pre => {
            let xn = tape.layer_norm(x, layer.ln1_gain, layer.ln1_offset, LN_EPS);
            let o = multi_head(tape, xn, layer, ctx, drop);
            let on = tape.layer_norm(o, layer.ln2_gain, layer.ln2_offset, LN_EPS);
            let f = ffn(tape, on, layer);
            let f = drop.apply(tape, f);
            tape.add(f, o)
        }
        NormPlacement::Post => {
            let o = multi_head(tape, x, layer, ctx, drop);
            let o = tape.layer_norm(o, layer.ln1_gain, layer.ln1_offset, LN_EPS);
            let f = ffn(tape, o, layer);
            let f = drop.apply(tape, f);
            let sum = tape.add(f, o);
            tape.layer_norm(sum, layer.ln2_gain, layer.ln2_offset, LN_EPS)
        }
    }
}

/// Stacks the given blocks on top of `x`.
pub fn stack_on(tape: &mut Tape, mut x: Var, layers: &[LayerVars], ctx: &BlockCtx, drop: &mut Dropout) -> Var {
    for layer in layers {
        x = san_block_on(tape, x, layer, ctx, drop);
    }
    x
}

/// Embedding followed by every encoder block.
pub fn encode_on(tape: &mut Tape, model: &Model, seqs: &[Vec<u32>], ctx: &BlockCtx, drop: &mut Dropout) -> Result<Var> {
    let e = embed_on(tape, model, seqs, drop)?;
    let layers: Vec<LayerVars> = model.ids.encoder.iter().map(|l| l.load(tape, &model.params)).collect();
    Ok(stack_on(tape, e, &layers, ctx, drop))
}

/// Embeds one padded sequence.
pub fn embed(model: &Model, seq: &[u32], drop: &mut Dropout) -> Result<Mat> {
    let mut tape = Tape::new();
    let v = embed_on(&mut tape, model, &[seq.to_vec()], drop)?;
    Ok(tape.value(v).clone())
}

/// One block applied to a single sequence's states.
pub fn san_block(
    x: &Mat,
    layer: &LayerParams,
    key_valid: &[bool],
    heads: usize,
    norm: NormPlacement,
    drop: &mut Dropout,
) -> Result<Mat> {
    let d = x.ncols();
    if d % heads != 0 || layer.wq.dim() != (d, d) || key_valid.len() != x.nrows() {
        return Err(Error::Shape(format!("block input {:?} with {heads} heads", x.dim())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = layer.to_tape(&mut tape);
    let ctx = BlockCtx {
        shape: AttnShape {
            batch: 1,
            seq_len: x.nrows(),
            heads,
        },
        key_valid: key_valid.to_vec(),
        norm,
    };
    let f = san_block_on(&mut tape, xv, &lv, &ctx, drop);
    Ok(tape.value(f).clone())
}

/// Full encoder over one padded sequence.
pub fn encode(model: &Model, seq: &[u32], drop: &mut Dropout) -> Result<HiddenStates> {
    let seqs = [seq.to_vec()];
    let ctx = BlockCtx::new(&seqs, model.config.num_heads, model.config.norm);
    let mut tape = Tape::new();
    let f = encode_on(&mut tape, model, &seqs, &ctx, drop)?;
    Ok(HiddenStates {
        states: tape.value(f).clone(),
        valid: ctx.key_valid,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::{derive, Stream};

    fn tiny(seed: u64) -> Model {
        Model::new(ModelConfig {
            num_items: 9,
            max_len: 5,
            hidden_dim: 4,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            dropout: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn layer(model: &Model, l: usize) -> LayerParams {
        LayerParams::from_store(&model.ids.encoder[l], &model.params)
    }

    #[test]
    fn all_padding_embeds_to_positions() {
        let m = tiny(1);
        let e = embed(&m, &[0; 5], &mut Dropout::off()).unwrap();
        assert_eq!(&e, m.params.value(m.ids.position_embedding));
    }

    #[test]
    fn embed_hand_addition() {
        let mut m = Model::new(ModelConfig {
            num_items: 3,
            max_len: 3,
            hidden_dim: 2,
            num_heads: 1,
            ..Default::default()
        })
        .unwrap();
        m.params
            .value_mut(m.ids.item_embedding)
            .row_mut(2)
            .assign(&array![1.0, 0.0]);
        m.params
            .value_mut(m.ids.position_embedding)
            .row_mut(2)
            .assign(&array![0.0, 1.0]);
        let e = embed(&m, &[0, 0, 2], &mut Dropout::off()).unwrap();
        assert_eq!(e.row(2).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn embed_bounds_error() {
        let m = tiny(1);
        assert!(matches!(
            embed(&m, &[0, 0, 0, 0, 10], &mut Dropout::off()),
            Err(Error::OutOfRange { index: 10, max: 9 })
        ));
    }

    #[test]
    fn embed_is_deterministic_without_dropout() {
        let m = tiny(2);
        let a = embed(&m, &[0, 3, 4, 5, 6], &mut Dropout::off()).unwrap();
        let b = embed(&m, &[0, 3, 4, 5, 6], &mut Dropout::off()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_changes_embedding_in_train_mode() {
        let m = tiny(2);
        let mut d = Dropout::new(0.5, derive(1, Stream::Dropout, &[]));
        let a = embed(&m, &[0, 3, 4, 5, 6], &mut d).unwrap();
        let b = embed(&m, &[0, 3, 4, 5, 6], &mut Dropout::off()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let e = array![[0.0, 0.0], [0.5, -1.0]];
        let id = Mat::eye(2);
        let h = attention_head(&e, &id, &id, &id, &[false, true]).unwrap();
        assert_eq!(h.row(1).to_vec(), vec![0.5, -1.0]);
        assert_eq!(h.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        // d/h = 1, identity projections; keys are zero so every logit is 0.
        let e = array![[1.0], [0.0]];
        let wq = array![[1.0]];
        let wk = array![[0.0]];
        let wv = array![[1.0]];
        let h = attention_head(&e, &wq, &wk, &wv, &[true, true]).unwrap();
        assert_abs_diff_eq!(h[[1, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(h[[0, 0]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn attention_is_causal_bitwise() {
        let mut rng = derive(4, Stream::Verify, &[]);
        let e = Mat::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let w = Mat::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let base = attention_head(&e, &w, &w.t().to_owned(), &w, &[true; 5]).unwrap();
        let mut e2 = e.clone();
        e2.row_mut(3).fill(7.0);
        let moved = attention_head(&e2, &w, &w.t().to_owned(), &w, &[true; 5]).unwrap();
        for t in 0..3 {
            assert_eq!(base.row(t), moved.row(t));
        }
        assert_ne!(base.row(3), moved.row(3));
    }

    #[test]
    fn zero_ffn_block_is_residual_identity() {
        let m = tiny(3);
        let mut l = layer(&m, 0);
        for w in [&mut l.w1, &mut l.w2, &mut l.b1, &mut l.b2] {
            w.fill(0.0);
        }
        let x = embed(&m, &[0, 1, 2, 3, 4], &mut Dropout::off()).unwrap();
        let valid = [false, true, true, true, true];
        let f = san_block(&x, &l, &valid, 2, NormPlacement::Pre, &mut Dropout::off()).unwrap();
        // With a zero FFN the block output is the concatenated attention output.
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(l.ln1_gain.clone());
        let o = tape.constant(l.ln1_offset.clone());
        let xn = tape.layer_norm(xv, g, o, LN_EPS);
        let xn = tape.value(xn).clone();
        let mut concat = Mat::zeros((5, 4));
        for h in 0..2 {
            let cols = ndarray::s![.., h * 2..(h + 1) * 2];
            let head = attention_head(
                &xn,
                &l.wq.slice(cols).to_owned(),
                &l.wk.slice(cols).to_owned(),
                &l.wv.slice(cols).to_owned(),
                &valid,
            )
            .unwrap();
            concat.slice_mut(cols).assign(&head);
        }
        for (a, b) in f.iter().zip(concat.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(f.ncols(), 4);
    }

    #[test]
    fn encode_composes_blocks() {
        let m = tiny(5);
        let seq = [0, 2, 7, 1, 9];
        let valid: Vec<bool> = seq.iter().map(|&i| i != 0).collect();
        let e = embed(&m, &seq, &mut Dropout::off()).unwrap();
        let f1 = san_block(&e, &layer(&m, 0), &valid, 2, m.config.norm, &mut Dropout::off()).unwrap();
        let f2 = san_block(&f1, &layer(&m, 1), &valid, 2, m.config.norm, &mut Dropout::off()).unwrap();
        let full = encode(&m, &seq, &mut Dropout::off()).unwrap();
        assert_eq!(full.states, f2);
        assert_eq!(full.valid, valid);

        let one = Model::new(ModelConfig {
            enc_layers: 1,
            ..m.config.clone()
        })
        .unwrap();
        let e1 = embed(&one, &seq, &mut Dropout::off()).unwrap();
        let f = san_block(&e1, &layer(&one, 0), &valid, 2, one.config.norm, &mut Dropout::off()).unwrap();
        assert_eq!(encode(&one, &seq, &mut Dropout::off()).unwrap().states, f);
    }

    #[test]
    fn order_of_past_items_matters() {
        let m = tiny(6);
        let a = encode(&m, &[0, 3, 5, 2, 8], &mut Dropout::off()).unwrap();
        let b = encode(&m, &[0, 5, 3, 2, 8], &mut Dropout::off()).unwrap();
        assert_ne!(a.states.row(4), b.states.row(4));
    }

    #[test]
    fn encode_shape_is_fixed() {
        let m = tiny(7);
        for seq in [[0, 0, 0, 0, 1], [1, 2, 3, 4, 5]] {
            assert_eq!(encode(&m, &seq, &mut Dropout::off()).unwrap().states.dim(), (5, 4));
        }
    }

    #[test]
    fn post_norm_variant_runs() {
        let mut m = tiny(8);
        m.config.norm = NormPlacement::Post;
        let h = encode(&m, &[0, 0, 1, 2, 3], &mut Dropout::off()).unwrap();
        assert!(h.states.iter().all(|v| v.is_finite()));
    }
}
