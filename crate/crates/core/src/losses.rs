//! The five terms of the training objective and their combination.
//!
//! Everything here is a plain function over values. The autodiff tape calls
//! the same kernels for its forward pass and supplies the matching adjoints.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::Similarity;
use crate::error::{Error, Result};

/// Per-step loss values. `total = (l_rs1 + l_rs2) + beta*(l_kl1 + l_kl2) + alpha*l_cl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rs1: f64,
    pub l_rs2: f64,
    pub l_kl1: f64,
    pub l_kl2: f64,
    pub l_cl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

/// Raw (unweighted) loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_rs1: f64,
    pub l_rs2: f64,
    pub l_kl1: f64,
    pub l_kl2: f64,
    pub l_cl: f64,
}

/// In-place numerically stable softmax; returns log of the normalizer.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of a full-catalog score vector against one target.
///
/// `scores[i]` is the score of item `i + 1`; `target` is a 1-based item index.
pub fn rec_loss(scores: &[f64], target: usize) -> Result<f64> {
    if target == 0 {
        return Err(Error::Contract("target is the padding index".into()));
    }
    if target > scores.len() {
        return Err(Error::OutOfRange {
            index: target,
            max: scores.len(),
        });
    }
    Ok(log_sum_exp(scores) - scores[target - 1])
}

/// KL(N(mu, exp(logvar)) || N(0, 1)) for one coordinate.
#[inline]
pub fn kl_term(mu: f64, logvar: f64) -> f64 {
    0.5 * (logvar.exp() + mu * mu - 1.0 - logvar)
}

/// Diagonal Gaussian KL against the standard normal prior, summed over
/// dimensions and averaged over the rows flagged valid.
pub fn kl_loss(mu: ArrayView2<f64>, sigma: ArrayView2<f64>, valid: &[bool]) -> Result<f64> {
    if mu.dim() != sigma.dim() || valid.len() != mu.nrows() {
        return Err(Error::Shape(format!(
            "mu {:?}, sigma {:?}, mask {}",
            mu.dim(),
            sigma.dim(),
            valid.len()
        )));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonFinite("sigma must be strictly positive".into()));
    }
    let logvar = sigma.mapv(|s| 2.0 * s.ln());
    Ok(kl_from_logvar(mu, logvar.view(), &row_weights(valid)))
}

/// Weights `1/count` on valid rows, zero elsewhere.
pub(crate) fn row_weights(valid: &[bool]) -> Vec<f64> {
    let n = valid.iter().filter(|&&v| v).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    valid.iter().map(|&v| if v { w } else { 0.0 }).collect()
}

pub(crate) fn kl_from_logvar(mu: ArrayView2<f64>, logvar: ArrayView2<f64>, weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row: f64 = mu
            .row(r)
            .iter()
            .zip(logvar.row(r).iter())
            .map(|(&m, &lv)| kl_term(m, lv))
            .sum();
        total += w * row;
    }
    total
}

/// Row-normalized copy (used for cosine similarity).
pub(crate) fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Logit matrix of the contrastive objective: row `u` holds
/// `[sim(z_u, z'_u), sim(z_u, z_v) for v != u]` divided by `tau`, with the
/// positive in column 0 and negatives in ascending `v` order.
pub(crate) fn info_nce_logits(z: ArrayView2<f64>, z2: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let b = z.nrows();
    let mut logits = Array2::zeros((b, b));
    for u in 0..b {
        logits[[u, 0]] = z.row(u).dot(&z2.row(u)) / tau;
        let mut c = 1;
        for v in 0..b {
            if v != u {
                logits[[u, c]] = z.row(u).dot(&z.row(v)) / tau;
                c += 1;
            }
        }
    }
    logits
}

/// InfoNCE with in-batch negatives drawn from the first view.
pub fn info_nce(z: ArrayView2<f64>, z2: ArrayView2<f64>, tau: f64, similarity: Similarity) -> Result<f64> {
    if z.dim() != z2.dim() {
        return Err(Error::Shape(format!("views {:?} vs {:?}", z.dim(), z2.dim())));
    }
    if z.nrows() < 2 {
        return Err(Error::Contract("InfoNCE needs a batch of at least 2".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract("tau must be positive".into()));
    }
    let logits = match similarity {
        Similarity::Dot => info_nce_logits(z, z2, tau),
        Similarity::Cosine => {
            let (a, _) = normalize_rows(z);
            let (b, _) = normalize_rows(z2);
            info_nce_logits(a.view(), b.view(), tau)
        }
    };
    let b = logits.nrows() as f64;
    let sum: f64 = logits
        .rows()
        .into_iter()
        .map(|row| log_sum_exp(row.as_slice().unwrap()) - row[0])
        .sum();
    Ok(sum / b)
}

/// Combines raw terms into the minimized objective.
pub fn total_loss(parts: LossParts, alpha: f64, beta: f64, tau: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_rs1", parts.l_rs1),
        ("l_rs2", parts.l_rs2),
        ("l_kl1", parts.l_kl1),
        ("l_kl2", parts.l_kl2),
        ("l_cl", parts.l_cl),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let total = (parts.l_rs1 + parts.l_rs2) + beta * (parts.l_kl1 + parts.l_kl2) + alpha * parts.l_cl;
    Ok(LossBreakdown {
        l_rs1: parts.l_rs1,
        l_rs2: parts.l_rs2,
        l_kl1: parts.l_kl1,
        l_kl2: parts.l_kl2,
        l_cl: parts.l_cl,
        total,
        alpha,
        beta,
        tau,
    })
}
