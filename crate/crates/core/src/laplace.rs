//! Laplace approximation with a possibly non-log-concave likelihood.
//!
//! The mode of `Ψ(f) = Σ log p(yᵢ|fᵢ) − ½ fᵀK⁻¹f` is found by Newton's method
//! with a backtracking line search. `W = −∇² log p` may have negative entries;
//! `(K⁻¹ + W)⁻¹` is formed with the same split factorization as EP, treating
//! `W` as site precisions.

use nalgebra::DVector;
use thiserror::Error;

use crate::ep::{EpProblem, SiteSet};
use crate::kernels::{kernel_matrix_grads, KernelError};
use crate::likelihood::{log_pdf, LikelihoodError};
use crate::linalg::{split_refresh, LinalgError, PosteriorApprox, SymMatrix};

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error("mode search failed after {0} iterations")]
    ModeSearchFailure(usize),
    #[error("mode not converged: gradient norm {0:e}")]
    NotConverged(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceConfig {
    pub max_iter: usize,
    /// Per-site gradient tolerance; the stopping norm is `tol × n`.
    pub tol: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig { max_iter: 200, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceState {
    pub f_hat: DVector<f64>,
    /// `K⁻¹ f̂`.
    pub a: DVector<f64>,
    pub w_diag: Vec<f64>,
    /// Posterior with `W` as site precisions; `cov` is `Σ_LA`.
    pub posterior: PosteriorApprox,
    pub log_ql: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl LaplaceState {
    pub fn cov(&self) -> &SymMatrix {
        &self.posterior.cov
    }

    /// Sites `τ̃ = W`, `ν̃ = W f̂ + ∇ log p(y|f̂)`: their posterior mean is `f̂`
    /// and `ν̃ − W f̂ = K⁻¹ f̂`, so predictions share the EP algebra.
    pub fn sites(&self) -> SiteSet {
        let n = self.w_diag.len();
        let mut s = SiteSet::zeros(n);
        for i in 0..n {
            s.tau_tilde[i] = self.w_diag[i];
            s.nu_tilde[i] = self.w_diag[i] * self.f_hat[i] + self.a[i];
        }
        s
    }
}

fn psi(problem: &EpProblem, f: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let lik: f64 = (0..f.len()).map(|i| log_pdf(problem.y[i], f[i], &problem.lik)).sum();
    lik - 0.5 * a.dot(f)
}

/// `(d1, W)` at `f`.
fn derivs(problem: &EpProblem, f: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
    let n = f.len();
    let mut g = DVector::zeros(n);
    let mut w = vec![0.0; n];
    for i in 0..n {
        let p = problem.lik.partials(problem.y[i], f[i]);
        g[i] = p.d1;
        w[i] = -p.d2;
    }
    (g, w)
}

fn newton_target(problem: &EpProblem, f: &DVector<f64>, g: &DVector<f64>, w: &[f64]) -> Result<(DVector<f64>, DVector<f64>), LinalgError> {
    let n = f.len();
    let mut sites = SiteSet::zeros(n);
    for i in 0..n {
        sites.tau_tilde[i] = w[i];
        sites.nu_tilde[i] = w[i] * f[i] + g[i];
    }
    let post = split_refresh(&problem.k, &sites)?;
    let a = post.alpha(&sites);
    Ok((post.mean, a))
}

fn mode_from(problem: &EpProblem, f0: DVector<f64>, config: &LaplaceConfig) -> Result<LaplaceState, LaplaceError> {
    let n = problem.len();
    let k = problem.k.as_matrix();
    // a = K⁻¹ f0 through the Cholesky factor of K
    let chol = crate::linalg::cholesky(&problem.k)?;
    let mut a = chol.solve_spd(&f0);
    let mut f = k * &a;
    let mut obj = psi(problem, &f, &a);
    let stop = config.tol * n.max(1) as f64;
    for it in 0..config.max_iter {
        let (g, w) = derivs(problem, &f);
        let grad_norm = (&g - &a).amax();
        if grad_norm < stop {
            return finish(problem, f, a, w, grad_norm, it);
        }
        // Full Newton if K⁻¹ + W is positive definite, else the non-negative part of W.
        let (f_new, a_new) = match newton_target(problem, &f, &g, &w) {
            Ok(t) => t,
            Err(_) => {
                let wp: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
                newton_target(problem, &f, &g, &wp)?
            }
        };
        let df = &f_new - &f;
        let da = &a_new - &a;
        if df.amax() < 1e-14 * (1.0 + f.amax()) && grad_norm < stop * 1e3 {
            // Newton step at roundoff level.
            return finish(problem, f, a, w, grad_norm, it);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let ft = &f + step * &df;
            let at = &a + step * &da;
            let o = psi(problem, &ft, &at);
            if o >= obj {
                f = ft;
                a = at;
                obj = o;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent left along the Newton direction: at the mode up to roundoff.
            let (g, w) = derivs(problem, &f);
            let grad_norm = (&g - &a).amax();
            if grad_norm < stop * 1e3 {
                return finish(problem, f, a, w, grad_norm, it);
            }
            return Err(LaplaceError::ModeSearchFailure(it));
        }
    }
    Err(LaplaceError::ModeSearchFailure(config.max_iter))
}

fn finish(
    problem: &EpProblem,
    f: DVector<f64>,
    a: DVector<f64>,
    w: Vec<f64>,
    grad_norm: f64,
    iterations: usize,
) -> Result<LaplaceState, LaplaceError> {
    let n = f.len();
    let mut sites = SiteSet::zeros(n);
    sites.tau_tilde.copy_from_slice(&w);
    // A maximum needs K⁻¹ + W positive definite.
    let posterior = split_refresh(&problem.k, &sites).map_err(|_| LaplaceError::ModeSearchFailure(iterations))?;
    let log_ql = psi(problem, &f, &a) - 0.5 * posterior.logdet;
    Ok(LaplaceState {
        f_hat: f,
        a,
        w_diag: w,
        posterior,
        log_ql,
        grad_norm,
        iterations,
    })
}

/// Finds the mode with three starts (zero, the observations and the
/// Gaussian-likelihood posterior mean) and keeps the highest `Ψ`.
pub fn laplace_fit(problem: &EpProblem) -> Result<LaplaceState, LaplaceError> {
    laplace_fit_with(problem, &LaplaceConfig::default())
}

pub fn laplace_fit_with(problem: &EpProblem, config: &LaplaceConfig) -> Result<LaplaceState, LaplaceError> {
    let n = problem.len();
    let y = DVector::from_column_slice(&problem.y);
    let mut noisy = problem.k.as_matrix().clone();
    for i in 0..n {
        noisy[(i, i)] += problem.lik.sigma2();
    }
    let gauss = crate::linalg::cholesky(&SymMatrix::from_matrix(noisy)?)?;
    let gauss_mean = problem.k.as_matrix() * gauss.solve_spd(&y);
    let starts = [DVector::zeros(n), y, gauss_mean];
    let mut best: Option<LaplaceState> = None;
    let mut last_err = None;
    for s in starts {
        match mode_from(problem, s, config) {
            Ok(st) => {
                let better = match &best {
                    Some(b) => psi(problem, &st.f_hat, &st.a) > psi(problem, &b.f_hat, &b.a),
                    None => true,
                };
                if better {
                    best = Some(st);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(LaplaceError::ModeSearchFailure(0)))
}

/// Gradient of `log q_LA(y)` over `[log σ_se², log l_k²..., log σ², log log ν]`,
/// including the terms from the dependence of `f̂` on the hyperparameters.
pub fn laplace_log_ml_grad(problem: &EpProblem, state: &LaplaceState) -> Result<Vec<f64>, LaplaceError> {
    let n = problem.len();
    let stop = 1e3 * LaplaceConfig::default().tol * n.max(1) as f64;
    if !(state.grad_norm < stop) {
        return Err(LaplaceError::NotConverged(state.grad_norm));
    }
    let sigma = state.posterior.cov.as_matrix();
    let kmat = problem.k.as_matrix();
    let r = state.posterior.weight_matrix(&state.w_diag);
    let parts: Vec<_> = (0..n).map(|i| problem.lik.partials(problem.y[i], state.f_hat[i])).collect();
    // ∂(−½ log|I + KW|)/∂f̂ᵢ
    let s2 = DVector::from_fn(n, |i, _| 0.5 * sigma[(i, i)] * parts[i].d3);
    let mut grad = Vec::new();
    for dk in kernel_matrix_grads(&problem.x, &problem.kernel)? {
        let dk = dk.as_matrix();
        let b = dk * &state.a;
        let explicit = 0.5 * state.a.dot(&b) - 0.5 * r.component_mul(dk).sum();
        let df = &b - kmat * (&r * &b);
        grad.push(explicit + s2.dot(&df));
    }
    for (j, fixed) in [(0usize, false), (1usize, problem.lik.nu_fixed)] {
        if fixed {
            grad.push(0.0);
            continue;
        }
        let mut explicit = 0.0;
        for (i, p) in parts.iter().enumerate() {
            explicit += p.dlogp[j] + 0.5 * sigma[(i, i)] * p.dd2[j];
        }
        let dd1 = DVector::from_fn(n, |i, _| parts[i].dd1[j]);
        let df = sigma * dd1;
        grad.push(explicit + s2.dot(&df));
    }
    Ok(grad)
}
