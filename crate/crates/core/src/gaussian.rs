//! Exact GP regression with Gaussian noise, the baseline for the robust models.
//!
//! The noise is written as sites `τ̃ᵢ = 1/σ²`, `ν̃ᵢ = yᵢ/σ²` so that prediction
//! shares the code path of the approximate methods.

use std::f64::consts::PI;

use crate::ep::{EpProblem, SiteSet};
use crate::kernels::{kernel_matrix_grads, KernelError};
use crate::linalg::{split_refresh, LinalgError, PosteriorApprox};

#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub sites: SiteSet,
    pub posterior: PosteriorApprox,
    pub log_ml: f64,
}

pub fn gaussian_sites(y: &[f64], sigma2: f64) -> SiteSet {
    let mut s = SiteSet::zeros(y.len());
    for (i, v) in y.iter().enumerate() {
        s.tau_tilde[i] = 1.0 / sigma2;
        s.nu_tilde[i] = v / sigma2;
    }
    s
}

/// Posterior and `log N(y | 0, K + σ²I)` with `σ²` from `problem.lik`.
pub fn gaussian_fit(problem: &EpProblem) -> Result<GaussianFit, LinalgError> {
    let n = problem.len();
    let s2 = problem.lik.sigma2();
    let sites = gaussian_sites(&problem.y, s2);
    let posterior = split_refresh(&problem.k, &sites)?;
    let alpha = posterior.alpha(&sites);
    let quad: f64 = problem.y.iter().zip(alpha.iter()).map(|(y, a)| y * a).sum();
    // log|K + σ²I| = log|I + K/σ²| + n log σ²
    let logdet = posterior.logdet + n as f64 * s2.ln();
    let log_ml = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln();
    Ok(GaussianFit { sites, posterior, log_ml })
}

/// Gradient over `[log σ_se², log l_k²..., log σ²]`.
pub fn gaussian_log_ml_grad(problem: &EpProblem, fit: &GaussianFit) -> Result<Vec<f64>, KernelError> {
    let alpha = fit.posterior.alpha(&fit.sites);
    let cinv = fit.posterior.weight_matrix(&fit.sites.tau_tilde);
    let mut grad = Vec::new();
    for dk in kernel_matrix_grads(&problem.x, &problem.kernel)? {
        let dk = dk.as_matrix();
        grad.push(0.5 * alpha.dot(&(dk * &alpha)) - 0.5 * cinv.component_mul(dk).sum());
    }
    let s2 = problem.lik.sigma2();
    grad.push(0.5 * s2 * (alpha.norm_squared() - cinv.trace()));
    Ok(grad)
}
