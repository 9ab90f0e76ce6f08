use rand_distr::{Distribution, StandardNormal};

use super::mean_se;
use crate::rng::Rng;

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `KL(N(mu, sigma^2) || N(0, 1))` by composite Simpson integration over
/// `mu ± 12 sigma`.
pub fn kl_numerical_1d(mu: f64, sigma: f64) -> f64 {
    let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = log_normal(x, mu, sigma);
        lq.exp() * (lq - log_normal(x, 0.0, 1.0))
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Monte-Carlo estimate (mean, SE) of `KL(N(mu, diag sigma^2) || N(0, I))`.
pub fn kl_monte_carlo(mu: &[f64], sigma: &[f64], samples: usize, rng: &mut Rng) -> (f64, f64) {
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            mu.iter()
                .zip(sigma)
                .map(|(&m, &s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    let z = m + s * e;
                    log_normal(z, m, s) - log_normal(z, 0.0, 1.0)
                })
                .sum()
        })
        .collect();
    mean_se(&draws)
}
