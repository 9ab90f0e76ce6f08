use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mean_se;
use crate::error::{Error, Result};
use crate::rng::{derive, Rng, Stream};

/// Gaussian prior over `(z, z')` and Gaussian posteriors for each view.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianToyModel {
    pub dim: usize,
    /// Joint prior covariance, `2·dim × 2·dim`, zero mean.
    pub prior_cov: DMatrix<f64>,
    pub q1_mean: DVector<f64>,
    pub q1_cov: DMatrix<f64>,
    pub q2_mean: DVector<f64>,
    pub q2_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// `E_q log p(z, z') / (q(z) q(z'))`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `E_q log p(z, z') / (p(z) p(z'))` from an independent sample set.
    pub mi_term: f64,
    pub mi_term_se: f64,
    pub kl1: f64,
    pub kl2: f64,
    /// `mi_term - kl1 - kl2`.
    pub rhs: f64,
    pub diff: f64,
    pub diff_se: f64,
    pub pass: bool,
}

struct Gauss {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_det: f64,
}

impl Gauss {
    fn new(mean: DVector<f64>, cov: &DMatrix<f64>, what: &str) -> Result<Self> {
        let c = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Degenerate(format!("{what} covariance is not SPD")))?;
        let log_det = 2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Gauss {
            mean,
            inv: c.inverse(),
            chol: c.l(),
            log_det,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let k = x.len() as f64;
        -0.5 * ((d.transpose() * &self.inv * &d)[(0, 0)] + self.log_det + k * (2.0 * std::f64::consts::PI).ln())
    }

    fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let e = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.chol * e
    }

    /// `KL(self || other)` in closed form.
    fn kl(&self, other: &Gauss) -> f64 {
        let k = self.mean.len() as f64;
        let cov = &self.chol * self.chol.transpose();
        let d = &other.mean - &self.mean;
        0.5 * ((&other.inv * cov).trace() + (d.transpose() * &other.inv * &d)[(0, 0)] - k + other.log_det
            - self.log_det)
    }
}

fn spd_cov(dim: usize, rng: &mut Rng, scale: f64) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    (&a * a.transpose()) * (scale / dim as f64) + DMatrix::identity(dim, dim) * 0.2
}

impl GaussianToyModel {
    /// Standard-normal marginals with cross-correlation `rho` on matching
    /// coordinates and the given posteriors.
    pub fn correlated(dim: usize, rho: f64, q1: (f64, f64), q2: (f64, f64)) -> Self {
        let mut prior = DMatrix::identity(2 * dim, 2 * dim);
        for i in 0..dim {
            prior[(i, dim + i)] = rho;
            prior[(dim + i, i)] = rho;
        }
        GaussianToyModel {
            dim,
            prior_cov: prior,
            q1_mean: DVector::from_element(dim, q1.0),
            q1_cov: DMatrix::identity(dim, dim) * q1.1.powi(2),
            q2_mean: DVector::from_element(dim, q2.0),
            q2_cov: DMatrix::identity(dim, dim) * q2.1.powi(2),
        }
    }

    /// Random dimension 1..=3, random SPD prior with cross-block coupling,
    /// random full-covariance posteriors.
    pub fn random(seed: u64) -> Self {
        let mut rng = derive(seed, Stream::Verify, &[0xE1B0]);
        let dim = rng.random_range(1..=3);
        let a = spd_cov(dim, &mut rng, 1.0);
        let b = spd_cov(dim, &mut rng, 1.0);
        // C = rho L_A L_B^T leaves Schur complement (1 - rho^2) B, so the joint is SPD
        let rho: f64 = rng.random_range(-0.8..0.8);
        let la = a.clone().cholesky().unwrap().l();
        let lb = b.clone().cholesky().unwrap().l();
        let c = &la * lb.transpose() * rho;
        let mut prior = DMatrix::zeros(2 * dim, 2 * dim);
        prior.view_mut((0, 0), (dim, dim)).copy_from(&a);
        prior.view_mut((dim, dim), (dim, dim)).copy_from(&b);
        prior.view_mut((0, dim), (dim, dim)).copy_from(&c);
        prior.view_mut((dim, 0), (dim, dim)).copy_from(&c.transpose());
        let mean = |rng: &mut Rng| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        GaussianToyModel {
            dim,
            prior_cov: prior,
            q1_mean: mean(&mut rng),
            q1_cov: spd_cov(dim, &mut rng, 0.6),
            q2_mean: mean(&mut rng),
            q2_cov: spd_cov(dim, &mut rng, 0.6),
        }
    }
}

/// Monte-Carlo check that the expected log ratio of the joint prior to the
/// factorized posterior equals the prior's dependence term minus both KLs.
pub fn check_elbo_decomposition(toy: &GaussianToyModel, num_samples: usize, seed: u64) -> Result<ElboReport> {
    if num_samples < 10_000 {
        return Err(Error::Config(format!("need at least 10^4 samples, got {num_samples}")));
    }
    let d = toy.dim;
    if toy.prior_cov.shape() != (2 * d, 2 * d) || toy.q1_cov.shape() != (d, d) || toy.q2_cov.shape() != (d, d) {
        return Err(Error::Shape("toy model blocks disagree with dim".into()));
    }
    if (&toy.prior_cov - toy.prior_cov.transpose()).amax() > 1e-12 {
        return Err(Error::Degenerate("prior covariance is not symmetric".into()));
    }
    let joint = Gauss::new(DVector::zeros(2 * d), &toy.prior_cov, "prior")?;
    let p1 = Gauss::new(
        DVector::zeros(d),
        &toy.prior_cov.view((0, 0), (d, d)).into_owned(),
        "prior z",
    )?;
    let p2 = Gauss::new(
        DVector::zeros(d),
        &toy.prior_cov.view((d, d), (d, d)).into_owned(),
        "prior z'",
    )?;
    let q1 = Gauss::new(toy.q1_mean.clone(), &toy.q1_cov, "q(z|s)")?;
    let q2 = Gauss::new(toy.q2_mean.clone(), &toy.q2_cov, "q(z'|s)")?;

    let stack = |a: &DVector<f64>, b: &DVector<f64>| DVector::from_iterator(2 * d, a.iter().chain(b.iter()).copied());
    let mut rng = derive(seed, Stream::Verify, &[1]);
    let lhs_draws: Vec<f64> = (0..num_samples)
        .map(|_| {
            let (z, z2) = (q1.sample(&mut rng), q2.sample(&mut rng));
            joint.log_pdf(&stack(&z, &z2)) - q1.log_pdf(&z) - q2.log_pdf(&z2)
        })
        .collect();
    let mut rng = derive(seed, Stream::Verify, &[2]);
    let mi_draws: Vec<f64> = (0..num_samples)
        .map(|_| {
            let (z, z2) = (q1.sample(&mut rng), q2.sample(&mut rng));
            joint.log_pdf(&stack(&z, &z2)) - p1.log_pdf(&z) - p2.log_pdf(&z2)
        })
        .collect();
    let (lhs, lhs_se) = mean_se(&lhs_draws);
    let (mi_term, mi_term_se) = mean_se(&mi_draws);
    let (kl1, kl2) = (q1.kl(&p1), q2.kl(&p2));
    let rhs = mi_term - kl1 - kl2;
    let diff = lhs - rhs;
    let diff_se = (lhs_se.powi(2) + mi_term_se.powi(2)).sqrt();
    Ok(ElboReport {
        lhs,
        lhs_se,
        mi_term,
        mi_term_se,
        kl1,
        kl2,
        rhs,
        diff,
        diff_se,
        pass: diff.abs() <= 3.0 * diff_se + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_match_gives_zero() {
        let toy = GaussianToyModel::correlated(2, 0.0, (0.0, 1.0), (0.0, 1.0));
        let r = check_elbo_decomposition(&toy, 10_000, 1).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs.abs() < 1e-12 && r.pass);
    }

    #[test]
    fn hand_set_one_dimensional() {
        let toy = GaussianToyModel::correlated(1, 0.6, (0.5, 0.7), (-0.3, 1.2));
        let r = check_elbo_decomposition(&toy, 50_000, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.kl1 > 0.0 && r.kl2 > 0.0);
    }

    #[test]
    fn independence_gives_zero_dependence_term() {
        let toy = GaussianToyModel::correlated(2, 0.0, (0.4, 0.5), (-0.2, 0.9));
        let r = check_elbo_decomposition(&toy, 10_000, 3).unwrap();
        assert!(r.mi_term.abs() < 1e-12);
    }

    #[test]
    fn non_spd_rejected() {
        let toy = GaussianToyModel::correlated(1, 1.5, (0.0, 1.0), (0.0, 1.0));
        assert!(matches!(
            check_elbo_decomposition(&toy, 10_000, 1),
            Err(Error::Degenerate(_))
        ));
        let toy = GaussianToyModel::correlated(1, 0.2, (0.0, 1.0), (0.0, 1.0));
        assert!(check_elbo_decomposition(&toy, 100, 1).is_err());
    }

    #[test]
    fn random_models_are_valid() {
        for s in 0..5 {
            let toy = GaussianToyModel::random(s);
            assert!(toy.prior_cov.clone().cholesky().is_some());
        }
    }
}
