//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! The op set is exactly what the encoder, decoder and objective need. A few
//! ops are fused (causal attention, layer norm, the three losses) so their
//! adjoints are written once, by hand, and checked against finite
//! differences in the test suites.

use ndarray::{s, Array2, Axis};

use crate::config::Similarity;
use crate::losses;
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀb` with `b` a single row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `exp(c · x)`
    Exp(Var, f64),
    Relu(Var),
    Dropout(Var, Mat),
    Rows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        key_valid: Vec<bool>,
        /// Post-softmax weights, `[batch, head, query, key]` flattened.
        probs: Vec<f64>,
        /// Scaled keep-mask over the weights, same layout.
        drop: Option<Vec<f64>>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    GaussianKl {
        mu: Var,
        logvar: Var,
        weights: Vec<f64>,
    },
    InfoNce {
        a: Var,
        b: Var,
        tau: f64,
        probs: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one slot per node.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn exp(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| (c * x).exp());
        let ng = self.ng(a);
        self.push(value, Op::Exp(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Multiplies by a pre-scaled keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let ng = self.ng(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Gathers rows `idx` of `a` (embedding lookup and row selection).
    pub fn rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::Rows(a, idx), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gain) + self.value(offset);
        let ng = self.ng(x) || self.ng(gain) || self.ng(offset);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head causal self-attention over `batch` stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × d`; head `i` owns columns
    /// `i·d/h .. (i+1)·d/h`. Query `t` sees keys `j ≤ t` whose `key_valid`
    /// flag is set; a query with no visible key outputs zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        key_valid: Vec<bool>,
        drop: Option<Vec<f64>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnShape {
            batch,
            seq_len: t,
            heads,
        } = shape;
        let d = qv.ncols();
        assert_eq!(qv.nrows(), batch * t, "attention rows");
        assert_eq!(key_valid.len(), batch * t, "attention mask");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = Mat::zeros((batch * t, d));
        let mut logits = vec![0.0; t];
        for b in 0..batch {
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qb = qv.slice(s![b * t..(b + 1) * t, c0..c1]);
                let kb = kv.slice(s![b * t..(b + 1) * t, c0..c1]);
                let vb = vv.slice(s![b * t..(b + 1) * t, c0..c1]);
                for i in 0..t {
                    let base = ((b * heads + h) * t + i) * t;
                    let mut any = false;
                    for j in 0..=i {
                        if key_valid[b * t + j] {
                            logits[j] = qb.row(i).dot(&kb.row(j)) * scale;
                            any = true;
                        } else {
                            logits[j] = f64::NEG_INFINITY;
                        }
                    }
                    if !any {
                        continue;
                    }
                    losses::softmax_in_place(&mut logits[..=i]);
                    let mut orow = out.slice_mut(s![b * t + i, c0..c1]);
                    for j in 0..=i {
                        let p = logits[j];
                        probs[base + j] = p;
                        let w = match &drop {
                            Some(m) => p * m[base + j],
                            None => p,
                        };
                        if w != 0.0 {
                            orow.scaled_add(w, &vb.row(j));
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                key_valid,
                probs,
                drop,
            },
            ng,
        )
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (value, norms) = losses::normalize_rows(self.value(x).view());
        let ng = self.ng(x);
        self.push(value, Op::NormalizeRows { x, norms }, ng)
    }

    /// Mean cross-entropy over rows; `targets` are 0-based column indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let x_t = row[t];
            let lse = losses::softmax_in_place(row.as_slice_mut().unwrap());
            total += lse - x_t;
        }
        let n = targets.len().max(1) as f64;
        let value = Mat::from_elem((1, 1), total / n);
        let ng = self.ng(logits);
        self.push(value, Op::CrossEntropy { logits, targets, probs }, ng)
    }

    /// Weighted sum over rows of the per-row Gaussian KL against N(0, I).
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var, weights: Vec<f64>) -> Var {
        let value = losses::kl_from_logvar(self.value(mu).view(), self.value(logvar).view(), &weights);
        let ng = self.ng(mu) || self.ng(logvar);
        self.push(
            Mat::from_elem((1, 1), value),
            Op::GaussianKl { mu, logvar, weights },
            ng,
        )
    }

    /// InfoNCE between matched rows of `a` and `b`, negatives from `a`.
    pub fn info_nce(&mut self, a: Var, b: Var, tau: f64, similarity: Similarity) -> Var {
        let (a, b) = match similarity {
            Similarity::Dot => (a, b),
            Similarity::Cosine => (self.normalize_rows(a), self.normalize_rows(b)),
        };
        let mut probs = losses::info_nce_logits(self.value(a).view(), self.value(b).view(), tau);
        let mut total = 0.0;
        for mut row in probs.rows_mut() {
            let pos = row[0];
            total += losses::softmax_in_place(row.as_slice_mut().unwrap()) - pos;
        }
        let value = Mat::from_elem((1, 1), total / probs.nrows() as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::InfoNce { a, b, tau, probs }, ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let value: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Mat::from_elem((1, 1), value), Op::WeightedSum(terms), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones(self.nodes[output.0].value.dim()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    /// Gradients of every parameter that appeared on this tape.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Mat)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Exp(a, c) => acc(*a, g * &node.value * *c),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::Rows(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                acc(*offset, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.ng(*x) {
                    let dxhat = g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv / d * (d * dh[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                key_valid,
                probs,
                drop,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let AttnShape {
                    batch,
                    seq_len: t,
                    heads,
                } = *shape;
                let dh = qv.ncols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                let mut dp = vec![0.0; t];
                for b in 0..batch {
                    for h in 0..heads {
                        let (c0, c1) = (h * dh, (h + 1) * dh);
                        for i in 0..t {
                            let base = ((b * heads + h) * t + i) * t;
                            let p = &probs[base..base + i + 1];
                            if p.iter().all(|&x| x == 0.0) {
                                continue;
                            }
                            let go = g.slice(s![b * t + i, c0..c1]);
                            let mut dot_pd = 0.0;
                            for j in 0..=i {
                                if !key_valid[b * t + j] {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let m = drop.as_ref().map_or(1.0, |m| m[base + j]);
                                let w = p[j] * m;
                                if w != 0.0 {
                                    dv.slice_mut(s![b * t + j, c0..c1]).scaled_add(w, &go);
                                }
                                dp[j] = go.dot(&vv.slice(s![b * t + j, c0..c1])) * m;
                                dot_pd += p[j] * dp[j];
                            }
                            for j in 0..=i {
                                if !key_valid[b * t + j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot_pd) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                dq.slice_mut(s![b * t + i, c0..c1])
                                    .scaled_add(ds, &kv.slice(s![b * t + j, c0..c1]));
                                dk.slice_mut(s![b * t + j, c0..c1])
                                    .scaled_add(ds, &qv.slice(s![b * t + i, c0..c1]));
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.nrows() {
                    let proj = y.row(r).dot(&g.row(r));
                    let mut row = dx.row_mut(r);
                    row.scaled_add(-proj, &y.row(r));
                    row.mapv_inplace(|v| v / norms[r]);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g[[0, 0]] / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d *= scale;
                acc(*logits, d);
            }
            Op::GaussianKl { mu, logvar, weights } => {
                let s = g[[0, 0]];
                let (m, lv) = (self.value(*mu), self.value(*logvar));
                let mut dm = m.clone();
                let mut dlv = lv.mapv(|x| 0.5 * (x.exp() - 1.0));
                for (r, &w) in weights.iter().enumerate() {
                    dm.row_mut(r).mapv_inplace(|x| x * w * s);
                    dlv.row_mut(r).mapv_inplace(|x| x * w * s);
                }
                acc(*mu, dm);
                acc(*logvar, dlv);
            }
            Op::InfoNce { a, b, tau, probs } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.nrows();
                let c = g[[0, 0]] / (n as f64 * tau);
                let mut da = Mat::zeros(av.dim());
                let mut db = Mat::zeros(bv.dim());
                for u in 0..n {
                    let w_pos = (probs[[u, 0]] - 1.0) * c;
                    da.row_mut(u).scaled_add(w_pos, &bv.row(u));
                    db.row_mut(u).scaled_add(w_pos, &av.row(u));
                    let mut col = 1;
                    for v in 0..n {
                        if v == u {
                            continue;
                        }
                        let w = probs[[u, col]] * c;
                        da.row_mut(u).scaled_add(w, &av.row(v));
                        da.row_mut(v).scaled_add(w, &av.row(u));
                        col += 1;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, Mat::from_elem((1, 1), g[[0, 0]] * w));
                }
            }
        }
    }
}
