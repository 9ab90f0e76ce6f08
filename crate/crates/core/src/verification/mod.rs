//! Independent numerical oracles for the objective's identities and bounds.

mod anneal;
mod elbo;
mod gradcheck;
mod kl;
mod mi;
mod suite;

use serde::{Deserialize, Serialize};

pub use anneal::{check_kl_annealing_effect, AnnealReport, AnnealRow, AnnealSetup};
pub use elbo::{check_elbo_decomposition, ElboReport, GaussianToyModel};
pub use gradcheck::{gradcheck_contrastive, gradcheck_model, GradcheckReport, GRADCHECK_STEP};
pub use kl::{kl_monte_carlo, kl_numerical_1d};
pub use mi::{check_mi_bound, MiBoundReport};
pub use suite::{gradcheck_config, run_suite, SuiteOptions, GRADCHECK_TOL, KL_INTEGRAL_TOL};

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}
