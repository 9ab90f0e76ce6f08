use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mean_se;
use crate::config::Similarity;
use crate::error::{Error, Result};
use crate::losses::info_nce;
use crate::rng::{derive, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiBoundReport {
    pub rho: f64,
    pub batch: usize,
    pub tau: f64,
    /// `-0.5 ln(1 - rho^2)`.
    pub true_mi: f64,
    /// Mean of `ln B - InfoNCE` over batches.
    pub bound: f64,
    pub bound_se: f64,
    pub pass: bool,
}

/// Estimates the contrastive lower bound on 1-D Gaussian pairs with
/// correlation `rho` and compares it with the analytic mutual information.
pub fn check_mi_bound(rho: f64, batch: usize, tau: f64, num_batches: usize, seed: u64) -> Result<MiBoundReport> {
    if rho.abs() >= 1.0 {
        return Err(Error::Config(format!("|rho| must be < 1, got {rho}")));
    }
    if batch < 2 || num_batches < 2 {
        return Err(Error::Config("need batch >= 2 and at least two batches".into()));
    }
    let mut rng = derive(seed, Stream::Verify, &[0x4D49, batch as u64]);
    let c = (1.0 - rho * rho).sqrt();
    let mut bounds = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut z = Array2::zeros((batch, 1));
        let mut z2 = Array2::zeros((batch, 1));
        for b in 0..batch {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            z[[b, 0]] = x;
            z2[[b, 0]] = rho * x + c * e;
        }
        let l = info_nce(z.view(), z2.view(), tau, Similarity::Dot)?;
        bounds.push((batch as f64).ln() - l);
    }
    let (bound, bound_se) = mean_se(&bounds);
    let true_mi = -0.5 * (1.0 - rho * rho).ln();
    Ok(MiBoundReport {
        rho,
        batch,
        tau,
        true_mi,
        bound,
        bound_se,
        pass: bound <= true_mi + 3.0 * bound_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_value_at_point_nine() {
        let r = check_mi_bound(0.9, 8, 1.0, 50, 1).unwrap();
        assert!((r.true_mi - 0.830366).abs() < 1e-6);
        assert!(r.pass);
    }

    #[test]
    fn independent_pairs_bound_near_zero() {
        let r = check_mi_bound(0.0, 64, 1.0, 200, 2).unwrap();
        assert_eq!(r.true_mi, 0.0);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn bound_grows_with_batch() {
        // A sharper critic lets large-norm negatives dominate and the bound
        // then falls with B; unit temperature is near the best dot critic.
        let small = check_mi_bound(0.9, 8, 1.0, 400, 3).unwrap();
        let large = check_mi_bound(0.9, 256, 1.0, 400, 3).unwrap();
        assert!(large.bound > small.bound + 3.0 * (small.bound_se.powi(2) + large.bound_se.powi(2)).sqrt());
        assert!(large.pass && small.pass);
    }

    #[test]
    fn invalid_rho_rejected() {
        assert!(check_mi_bound(1.0, 8, 1.0, 10, 0).is_err());
    }
}
