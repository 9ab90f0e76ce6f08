use rand::Rng as _;

use super::{
    check_elbo_decomposition, check_kl_annealing_effect, check_mi_bound, gradcheck_contrastive, gradcheck_model,
    kl_monte_carlo, kl_numerical_1d, AnnealSetup, CheckResult, GaussianToyModel, VerifyReport,
};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::losses::kl_term;
use crate::rng::{derive, Stream};

/// Gradient-check tolerance on the relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Worst allowed gap between closed-form and integrated KL.
pub const KL_INTEGRAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Randomized Gaussian toys for the ELBO identity.
    pub toys: usize,
    pub elbo_samples: usize,
    /// Randomized `(mu, sigma)` pairs for the KL oracle.
    pub kl_draws: usize,
    pub kl_samples: usize,
    pub mi_batches: usize,
    /// β grid and setup of the (slow) annealing sweep, if wanted.
    pub anneal: Option<(Vec<f64>, AnnealSetup)>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            toys: 20,
            elbo_samples: 20_000,
            kl_draws: 100,
            kl_samples: 20_000,
            mi_batches: 200,
            anneal: None,
        }
    }
}

/// Small model used by the gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        num_items: 7,
        max_len: 5,
        hidden_dim: 4,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        alpha: 0.1,
        beta: 0.2,
        ..Default::default()
    }
}

fn check(name: impl Into<String>, estimate: f64, se: f64, threshold: f64, pass: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        estimate,
        se,
        threshold,
        pass,
        detail,
    }
}

/// Runs every oracle check and collects one line per check.
pub fn run_suite(opts: &SuiteOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let seed = opts.seed;

    for (name, r) in [
        ("gradcheck.model", gradcheck_model(&gradcheck_config(), seed + 1)?),
        (
            "gradcheck.contrastive",
            gradcheck_contrastive(&gradcheck_config(), seed + 1)?,
        ),
    ] {
        let detail = format!("worst {} over {} scalars", r.worst, r.checked);
        checks.push(check(
            name,
            r.max_rel_error,
            0.0,
            GRADCHECK_TOL,
            r.max_rel_error < GRADCHECK_TOL,
            detail,
        ));
    }

    let mut rng = derive(seed, Stream::Verify, &[0x4B4C]);
    let (mut within, mut worst) = (0usize, 0.0f64);
    for _ in 0..opts.kl_draws {
        let mu = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.2..2.5);
        let closed = kl_term(mu, 2.0 * sigma.ln());
        let (m, se) = kl_monte_carlo(&[mu], &[sigma], opts.kl_samples, &mut rng);
        within += usize::from((m - closed).abs() <= 3.0 * se);
        worst = worst.max((kl_numerical_1d(mu, sigma) - closed).abs());
    }
    // each draw misses 3 SE with probability 0.0027
    let frac = within as f64 / opts.kl_draws.max(1) as f64;
    let detail = format!("{within}/{} draws within 3 SE", opts.kl_draws);
    checks.push(check("kl.monte_carlo", frac, 0.0, 0.97, frac >= 0.97, detail));
    let detail = "max |closed form - quadrature|".to_string();
    checks.push(check(
        "kl.integration",
        worst,
        0.0,
        KL_INTEGRAL_TOL,
        worst < KL_INTEGRAL_TOL,
        detail,
    ));

    for k in 0..opts.toys as u64 {
        let toy = GaussianToyModel::random(seed * 1000 + k);
        let r = check_elbo_decomposition(&toy, opts.elbo_samples, seed * 1000 + k)?;
        let detail = format!("lhs {:.4} rhs {:.4} (dim {})", r.lhs, r.rhs, toy.dim);
        checks.push(check(
            format!("elbo.toy{k}"),
            r.diff,
            r.diff_se,
            3.0 * r.diff_se,
            r.pass,
            detail,
        ));
    }

    for rho in [0.0, 0.5, 0.9] {
        for batch in [8, 64, 256] {
            let r = check_mi_bound(rho, batch, 1.0, opts.mi_batches, seed)?;
            let detail = format!("bound {:.4} vs mutual information {:.4}", r.bound, r.true_mi);
            checks.push(check(
                format!("mi.rho{rho}.b{batch}"),
                r.bound,
                r.bound_se,
                r.true_mi,
                r.pass,
                detail,
            ));
        }
    }

    if let Some((betas, setup)) = &opts.anneal {
        let r = check_kl_annealing_effect(betas, setup)?;
        let detail = r
            .rows
            .iter()
            .map(|row| {
                format!(
                    "beta {}: kl {:.3} sigma {:.3} ndcg10 {:.3}",
                    row.beta, row.mean_kl, row.mean_sigma, row.ndcg10
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        let last = r.rows.last().map_or(0.0, |row| row.mean_kl);
        checks.push(check("kl_annealing", last, 0.0, 0.0, r.pass, detail));
    }
    Ok(VerifyReport { checks })
}
