//! Student-t observation model.
//!
//! `p(y | f, σ², ν) = Γ((ν+1)/2) / (Γ(ν/2) √(νπ) σ) · (1 + (y − f)² / (ν σ²))^{−(ν+1)/2}`
//!
//! The scale is stored as `log σ²` and the degrees of freedom as `log log ν`,
//! which keeps `ν > 1` for every finite coordinate.
//!
//! Tilted moments of `N(f | μ₋, σ₋²) p(y | f)^η` are computed by adaptive
//! Gauss–Kronrod quadrature over
//! `[min(μ₋ − 6σ₋, μ∞ − 6σ∞), max(μ₋ + 6σ₋, μ∞ + 6σ∞)]`, where
//! `σ∞² = (σ₋⁻² + η σ⁻²)⁻¹` and `μ∞ = σ∞² (σ₋⁻² μ₋ + η σ⁻² y)` describe the
//! Gaussian (ν → ∞) limit of the tilted distribution.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::quadrature::{integrate, QuadConfig, QuadError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("tilted-moment quadrature failed: {0}")]
    QuadratureFailure(#[from] QuadError),
    #[error("tilted variance is not positive ({0:e})")]
    NonPositiveVariance(f64),
    #[error("cavity precision must be positive, got {0:e}")]
    InvalidCavity(f64),
    #[error("fraction η must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid Student-t parameters: {0}")]
    InvalidParams(String),
}

/// `ln Γ(x + ½) − ln Γ(x)`, accurate for large `x`.
fn ln_gamma_half_ratio(x: f64) -> f64 {
    if x < 100.0 {
        ln_gamma(x + 0.5) - ln_gamma(x)
    } else {
        let r = 1.0 / x;
        let r2 = r * r;
        0.5 * x.ln() - r / 8.0 + r * r2 / 192.0 + r * r2 * r2 / 640.0 - 17.0 * r * r2 * r2 * r2 / 14336.0
    }
}

/// `ψ(x + ½) − ψ(x)`, accurate for large `x`.
fn digamma_half_diff(x: f64) -> f64 {
    if x < 100.0 {
        digamma(x + 0.5) - digamma(x)
    } else {
        let r = 1.0 / x;
        let r2 = r * r;
        0.5 * r + r2 / 8.0 - r2 * r2 / 64.0 - r2 * r2 * r2 / 128.0 + 17.0 * r2 * r2 * r2 * r2 / 2048.0
    }
}

/// Student-t likelihood parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTParams {
    /// `log σ²`.
    pub log_sigma2: f64,
    /// `log log ν`.
    pub loglog_nu: f64,
    /// Excludes ν from optimization; its gradient is reported as zero.
    #[serde(default)]
    pub nu_fixed: bool,
}

impl StudentTParams {
    /// From `ν > 1` and `σ² > 0`.
    pub fn new(nu: f64, sigma2: f64) -> Result<Self, LikelihoodError> {
        if !(nu > 1.0) || !nu.is_finite() {
            return Err(LikelihoodError::InvalidParams(format!("ν must be a finite value > 1, got {nu}")));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(LikelihoodError::InvalidParams(format!("σ² must be positive, got {sigma2}")));
        }
        Ok(StudentTParams {
            log_sigma2: sigma2.ln(),
            loglog_nu: nu.ln().ln(),
            nu_fixed: false,
        })
    }

    pub fn with_nu_fixed(mut self, fixed: bool) -> Self {
        self.nu_fixed = fixed;
        self
    }

    pub fn nu(&self) -> f64 {
        self.loglog_nu.exp().exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    /// `dν / d(log log ν) = ν log ν`.
    fn dnu_dloglog(&self) -> f64 {
        let nu = self.nu();
        nu * nu.ln()
    }

    /// `log Γ((ν+1)/2) − log Γ(ν/2) − ½ log(νπσ²)`.
    fn log_norm(&self) -> f64 {
        let nu = self.nu();
        ln_gamma_half_ratio(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - 0.5 * self.log_sigma2
    }

    /// `−(ν+1)/2 · log(1 + r²/(νσ²))`.
    fn log_kernel(&self, r: f64) -> f64 {
        let nu = self.nu();
        -0.5 * (nu + 1.0) * (r * r / (nu * self.sigma2())).ln_1p()
    }

    /// Partial derivatives of `log p` with respect to `(log σ², log log ν)` at residual `r = y − f`.
    fn param_partials(&self, r: f64) -> (f64, f64) {
        let nu = self.nu();
        let s = nu * self.sigma2();
        let r2 = r * r;
        let dsigma = -0.5 + 0.5 * (nu + 1.0) * r2 / (s + r2);
        let dnu = if self.nu_fixed {
            0.0
        } else {
            let d = 0.5 * digamma_half_diff(0.5 * nu) - 0.5 / nu - 0.5 * (r2 / s).ln_1p()
                + 0.5 * (nu + 1.0) * r2 / (nu * (s + r2));
            d * self.dnu_dloglog()
        };
        (dsigma, dnu)
    }

    /// Everything the Laplace gradient needs at residual `y − f`.
    pub fn partials(&self, y: f64, f: f64) -> LogPdfPartials {
        let nu = self.nu();
        let s = nu * self.sigma2();
        let r = y - f;
        let r2 = r * r;
        let q = s + r2;
        let d1 = (nu + 1.0) * r / q;
        let d2 = (nu + 1.0) * (r2 - s) / (q * q);
        let d3 = -2.0 * (nu + 1.0) * r * (3.0 * s - r2) / (q * q * q);
        let (dlogp_dsigma, dlogp_dnu) = self.param_partials(r);
        let dd1_dsigma = -(nu + 1.0) * r * s / (q * q);
        let dd2_dsigma = (nu + 1.0) * s * (s - 3.0 * r2) / (q * q * q);
        let (dd1_dnu, dd2_dnu) = if self.nu_fixed {
            (0.0, 0.0)
        } else {
            let sig2 = self.sigma2();
            let c = self.dnu_dloglog();
            let a = r / q - (nu + 1.0) * r * sig2 / (q * q);
            let b = (r2 - s) / (q * q) + (nu + 1.0) * sig2 * (s - 3.0 * r2) / (q * q * q);
            (a * c, b * c)
        };
        LogPdfPartials {
            d1,
            d2,
            d3,
            dlogp: [dlogp_dsigma, dlogp_dnu],
            dd1: [dd1_dsigma, dd1_dnu],
            dd2: [dd2_dsigma, dd2_dnu],
        }
    }
}

/// Derivatives of `log p(y | f)`; the arrays are indexed by `(log σ², log log ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPdfPartials {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub dlogp: [f64; 2],
    pub dd1: [f64; 2],
    pub dd2: [f64; 2],
}

pub fn log_pdf(y: f64, f: f64, p: &StudentTParams) -> f64 {
    p.log_norm() + p.log_kernel(y - f)
}

/// First and second derivative of `log p(y | f)` with respect to `f`.
pub fn log_pdf_derivs(y: f64, f: f64, p: &StudentTParams) -> (f64, f64) {
    let nu = p.nu();
    let s = nu * p.sigma2();
    let r = y - f;
    let q = s + r * r;
    ((nu + 1.0) * r / q, (nu + 1.0) * (r * r - s) / (q * q))
}

/// Cavity distribution in natural parameters: precision and precision × mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cavity {
    pub tau_neg: f64,
    pub nu_neg: f64,
}

impl Cavity {
    pub fn from_moments(mean: f64, var: f64) -> Self {
        Cavity {
            tau_neg: 1.0 / var,
            nu_neg: mean / var,
        }
    }

    pub fn mean(&self) -> f64 {
        self.nu_neg / self.tau_neg
    }

    pub fn var(&self) -> f64 {
        1.0 / self.tau_neg
    }
}

/// Normalizer, mean and variance of a tilted distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    pub log_zhat: f64,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
}

/// Integration frame of one tilted distribution.
struct Frame<'a> {
    p: &'a StudentTParams,
    y: f64,
    eta: f64,
    mu_c: f64,
    tau_c: f64,
    /// Integration limits and interior breakpoints, in `f`.
    points: Vec<f64>,
    /// Modes of the Gaussian pieces, candidates for centring.
    candidates: [(f64, f64); 2],
    log_ref: f64,
}

impl<'a> Frame<'a> {
    fn new(c: &Cavity, y: f64, p: &'a StudentTParams, eta: f64) -> Result<Self, LikelihoodError> {
        if !(c.tau_neg > 0.0) || !c.tau_neg.is_finite() || !c.nu_neg.is_finite() {
            return Err(LikelihoodError::InvalidCavity(c.tau_neg));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(LikelihoodError::InvalidFraction(eta));
        }
        let mu_c = c.mean();
        let sd_c = c.var().sqrt();
        let tau_inf = c.tau_neg + eta / p.sigma2();
        let var_inf = 1.0 / tau_inf;
        let mu_inf = var_inf * (c.nu_neg + eta * y / p.sigma2());
        let sd_inf = var_inf.sqrt();
        // Breakpoints at 6, 10 and 20 sd keep Gaussian tails resolved when the
        // other piece stretches an interval far away.
        let lo = (mu_c - 20.0 * sd_c).min(mu_inf - 20.0 * sd_inf);
        let hi = (mu_c + 20.0 * sd_c).max(mu_inf + 20.0 * sd_inf);
        let mut points = vec![lo, hi, mu_c, mu_inf, y.clamp(lo, hi)];
        for (m, s) in [(mu_c, sd_c), (mu_inf, sd_inf)] {
            for k in [6.0, 10.0] {
                points.push(m - k * s);
                points.push(m + k * s);
            }
        }
        points.sort_by(|a, b| a.total_cmp(b));
        points.dedup();
        let mut frame = Frame {
            p,
            y,
            eta,
            mu_c,
            tau_c: c.tau_neg,
            points,
            candidates: [(mu_c, sd_c), (mu_inf, sd_inf)],
            log_ref: 0.0,
        };
        frame.log_ref = [mu_c, mu_inf, y.clamp(lo, hi)]
            .iter()
            .map(|&f| frame.log_g(f))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(frame)
    }

    /// Unnormalized log integrand without constants.
    fn log_g(&self, f: f64) -> f64 {
        let d = f - self.mu_c;
        -0.5 * self.tau_c * d * d + self.eta * self.p.log_kernel(self.y - f)
    }

    /// Constant dropped from `log_g`: `−½ log(2π σ₋²) + η log C(ν, σ²)`.
    fn log_const(&self) -> f64 {
        -0.5 * (LN_2PI - self.tau_c.ln()) + self.eta * self.p.log_norm()
    }

    fn default_centre(&self) -> (f64, f64) {
        let [a, b] = self.candidates;
        if self.log_g(a.0) >= self.log_g(b.0) {
            a
        } else {
            b
        }
    }

    /// Integrates `[e, e z, e z², e·h₁, e·h₂]` in `z = (f − centre) / scale`,
    /// where `e = exp(log_g − log_ref)` and `h` are the optional extra factors.
    fn integrate(
        &self,
        centre: f64,
        scale: f64,
        extra: Option<&dyn Fn(f64) -> (f64, f64)>,
    ) -> Result<[f64; 5], LikelihoodError> {
        let zpoints: Vec<f64> = self.points.iter().map(|f| (f - centre) / scale).collect();
        let g = |z: f64| {
            let f = centre + scale * z;
            let e = (self.log_g(f) - self.log_ref).exp();
            let (h1, h2) = match extra {
                Some(h) => h(f),
                None => (0.0, 0.0),
            };
            [e, e * z, e * z * z, e * h1, e * h2]
        };
        Ok(integrate(g, &zpoints, &QuadConfig::default())?)
    }

    fn moments(&self) -> Result<TiltedMoments, LikelihoodError> {
        let (mut centre, mut scale) = self.default_centre();
        let mut pass = 0;
        loop {
            let r = self.integrate(centre, scale, None)?;
            let m0 = r[0];
            if !(m0 > 0.0) {
                return Err(LikelihoodError::NonPositiveVariance(0.0));
            }
            let ez = r[1] / m0;
            let var_z = r[2] / m0 - ez * ez;
            let mean = centre + scale * ez;
            let var = scale * scale * var_z;
            if !(var > 0.0) || !var.is_finite() {
                return Err(LikelihoodError::NonPositiveVariance(var));
            }
            // Recentre once when the mass sits far from the chosen frame.
            let sd = var.sqrt();
            if pass == 0 && (ez.abs() > 3.0 || sd < 0.1 * scale || sd > 10.0 * scale) {
                centre = mean;
                scale = sd;
                pass = 1;
                continue;
            }
            let log_zhat = m0.ln() + scale.ln() + self.log_ref + self.log_const();
            return Ok(TiltedMoments {
                log_zhat,
                mu_hat: mean,
                sigma2_hat: var,
            });
        }
    }
}

/// Moments of `N(f | μ₋, σ₋²) p(y | f)^η`.
pub fn tilted_moments(c: &Cavity, y: f64, p: &StudentTParams, eta: f64) -> Result<TiltedMoments, LikelihoodError> {
    Frame::new(c, y, p, eta)?.moments()
}

/// Derivatives of `log Ẑ` with respect to `(log σ², log log ν)`.
pub fn tilted_moments_paramgrad(
    c: &Cavity,
    y: f64,
    p: &StudentTParams,
    eta: f64,
) -> Result<(f64, f64), LikelihoodError> {
    let frame = Frame::new(c, y, p, eta)?;
    let (centre, scale) = frame.default_centre();
    let h = |f: f64| p.param_partials(y - f);
    let r = frame.integrate(centre, scale, Some(&h))?;
    if !(r[0] > 0.0) {
        return Err(LikelihoodError::NonPositiveVariance(0.0));
    }
    let dnu = if p.nu_fixed { 0.0 } else { eta * r[4] / r[0] };
    Ok((eta * r[3] / r[0], dnu))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_product(c: &Cavity, y: f64, sigma2: f64, eta: f64) -> (f64, f64, f64) {
        let tau = c.tau_neg + eta / sigma2;
        let var = 1.0 / tau;
        let mean = var * (c.nu_neg + eta * y / sigma2);
        (mean, var, tau)
    }

    #[test]
    fn cauchy_at_centre() {
        let p = StudentTParams::new(1.0 + 1e-14, 1.0).unwrap();
        assert!((log_pdf(0.3, 0.3, &p) - (1.0 / std::f64::consts::PI).ln()).abs() < 1e-10);
        assert!((log_pdf(0.3, 0.3, &p) + 1.14473).abs() < 1e-5);
    }

    #[test]
    fn parameter_validation() {
        assert!(StudentTParams::new(1.0, 1.0).is_err());
        assert!(StudentTParams::new(4.0, 0.0).is_err());
        assert!(StudentTParams::new(f64::INFINITY, 1.0).is_err());
        let p = StudentTParams::new(4.0, 0.25).unwrap();
        assert!((p.nu() - 4.0).abs() < 1e-12);
        assert!((p.sigma2() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn large_nu_is_gaussian() {
        let p = StudentTParams::new(1e6, 1.0).unwrap();
        for r in [0.0, 0.5, 1.5, -2.0] {
            let gauss = -0.5 * LN_2PI - 0.5 * r * r;
            assert!((log_pdf(r, 0.0, &p) - gauss).abs() < 1e-5);
        }
    }

    #[test]
    fn reference_value() {
        // mpmath, 40 digits: log t_4(1 | 0, 0.5)
        let p = StudentTParams::new(4.0, 0.25).unwrap();
        assert!((log_pdf(1.0, 0.0, &p) - (-2.0205500238516442)).abs() < 1e-12);
    }

    #[test]
    fn derivative_zeros_and_inflection() {
        let p = StudentTParams::new(3.0, 0.49).unwrap();
        let (d1, _) = log_pdf_derivs(1.2, 1.2, &p);
        assert_eq!(d1, 0.0);
        let edge = (p.nu() * p.sigma2()).sqrt();
        let (_, d2) = log_pdf_derivs(1.2 + edge, 1.2, &p);
        assert!(d2.abs() < 1e-14);
        // −d2 is most negative at |r| = σ √(3ν)
        let at = (3.0 * p.nu() * p.sigma2()).sqrt();
        let w = |r: f64| -log_pdf_derivs(r, 0.0, &p).1;
        assert!(w(at) < w(at * 0.99) && w(at) < w(at * 1.01));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = StudentTParams::new(2.7, 0.3).unwrap();
        let (y, f, h) = (0.4, -0.35, 1e-5);
        let (d1, d2) = log_pdf_derivs(y, f, &p);
        let fd1 = (log_pdf(y, f + h, &p) - log_pdf(y, f - h, &p)) / (2.0 * h);
        let fd2 = (log_pdf_derivs(y, f + h, &p).0 - log_pdf_derivs(y, f - h, &p).0) / (2.0 * h);
        assert!(((d1 - fd1) / d1).abs() < 1e-6);
        assert!(((d2 - fd2) / d2).abs() < 1e-6);
        let part = p.partials(y, f);
        let fd3 = (log_pdf_derivs(y, f + h, &p).1 - log_pdf_derivs(y, f - h, &p).1) / (2.0 * h);
        assert!(((part.d3 - fd3) / part.d3).abs() < 1e-6);
    }

    #[test]
    fn parameter_partials_match_finite_differences() {
        let p = StudentTParams::new(3.3, 0.2).unwrap();
        let (y, f, h) = (0.9, 0.1, 1e-6);
        let part = p.partials(y, f);
        for k in 0..2 {
            let shift = |s: f64| {
                let mut q = p.clone();
                if k == 0 {
                    q.log_sigma2 += s;
                } else {
                    q.loglog_nu += s;
                }
                q
            };
            let (pp, pm) = (shift(h), shift(-h));
            let fd = (log_pdf(y, f, &pp) - log_pdf(y, f, &pm)) / (2.0 * h);
            assert!((part.dlogp[k] - fd).abs() < 1e-6 * fd.abs().max(1.0), "dlogp[{k}]");
            let fd1 = (log_pdf_derivs(y, f, &pp).0 - log_pdf_derivs(y, f, &pm).0) / (2.0 * h);
            assert!((part.dd1[k] - fd1).abs() < 1e-6 * fd1.abs().max(1.0), "dd1[{k}]");
            let fd2 = (log_pdf_derivs(y, f, &pp).1 - log_pdf_derivs(y, f, &pm).1) / (2.0 * h);
            assert!((part.dd2[k] - fd2).abs() < 1e-6 * fd2.abs().max(1.0), "dd2[{k}]");
        }
    }

    #[test]
    fn conjugate_limit_moments() {
        let p = StudentTParams::new(1e8, 0.3).unwrap();
        let c = Cavity::from_moments(0.2, 0.8);
        let t = tilted_moments(&c, 1.1, &p, 1.0).unwrap();
        let (mean, var, _) = gaussian_product(&c, 1.1, 0.3, 1.0);
        assert!((t.mu_hat - mean).abs() < 1e-6);
        assert!((t.sigma2_hat - var).abs() < 1e-6);
        let logz = -0.5 * LN_2PI - 0.5 * (0.8f64 + 0.3).ln() - 0.5 * (1.1f64 - 0.2).powi(2) / 1.1;
        assert!((t.log_zhat - logz).abs() < 1e-6);
    }

    #[test]
    fn symmetric_integrand_keeps_mean() {
        let p = StudentTParams::new(2.0, 0.01).unwrap();
        let c = Cavity::from_moments(0.7, 2.0);
        let t = tilted_moments(&c, 0.7, &p, 1.0).unwrap();
        assert!((t.mu_hat - 0.7).abs() < 1e-9);
    }

    fn trapezoid_oracle(c: &Cavity, y: f64, p: &StudentTParams, eta: f64, n: usize) -> (f64, f64, f64) {
        let mu_c = c.mean();
        let sd_c = c.var().sqrt();
        let (mu_inf, var_inf, _) = gaussian_product(c, y, p.sigma2(), eta);
        let sd_inf = var_inf.sqrt();
        let lo = (mu_c - 6.0 * sd_c).min(mu_inf - 6.0 * sd_inf);
        let hi = (mu_c + 6.0 * sd_c).max(mu_inf + 6.0 * sd_inf);
        let h = (hi - lo) / (n - 1) as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let f = lo + h * i as f64;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let g = w * (-0.5 * (f - mu_c).powi(2) * c.tau_neg - 0.5 * (LN_2PI - c.tau_neg.ln()) + eta * log_pdf(y, f, p)).exp();
            m0 += g;
            m1 += g * (f - mu_inf);
            m2 += g * (f - mu_inf).powi(2);
        }
        let mean = m1 / m0;
        ((m0 * h).ln(), mu_inf + mean, m2 / m0 - mean * mean)
    }

    #[test]
    fn bimodal_case_matches_trapezoid_oracle() {
        let p = StudentTParams::new(2.0, 0.01).unwrap();
        let c = Cavity::from_moments(0.0, 1.0);
        let t = tilted_moments(&c, 3.0, &p, 1.0).unwrap();
        let (logz, mean, var) = trapezoid_oracle(&c, 3.0, &p, 1.0, 1_000_000);
        assert!((t.log_zhat - logz).abs() < 1e-8);
        assert!((t.mu_hat - mean).abs() / mean.abs() < 1e-8);
        assert!((t.sigma2_hat - var).abs() / var < 1e-8);
    }

    #[test]
    fn translation_equivariance() {
        let p = StudentTParams::new(3.0, 0.2).unwrap();
        let a = tilted_moments(&Cavity::from_moments(0.1, 0.5), 1.4, &p, 0.5).unwrap();
        let b = tilted_moments(&Cavity::from_moments(10.1, 0.5), 11.4, &p, 0.5).unwrap();
        assert!((a.mu_hat + 10.0 - b.mu_hat).abs() < 1e-9);
        assert!((a.sigma2_hat - b.sigma2_hat).abs() < 1e-9);
        assert!((a.log_zhat - b.log_zhat).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs() {
        let p = StudentTParams::new(3.0, 0.2).unwrap();
        let bad = Cavity { tau_neg: -1.0, nu_neg: 0.0 };
        assert!(matches!(tilted_moments(&bad, 0.0, &p, 1.0), Err(LikelihoodError::InvalidCavity(_))));
        let c = Cavity::from_moments(0.0, 1.0);
        assert!(matches!(tilted_moments(&c, 0.0, &p, 0.0), Err(LikelihoodError::InvalidFraction(_))));
        assert!(matches!(tilted_moments(&c, 0.0, &p, 1.5), Err(LikelihoodError::InvalidFraction(_))));
    }

    #[test]
    fn paramgrad_cases() {
        let c = Cavity::from_moments(0.3, 0.6);
        let p = StudentTParams::new(1e8, 0.4).unwrap().with_nu_fixed(true);
        let (ds, dn) = tilted_moments_paramgrad(&c, 1.0, &p, 1.0).unwrap();
        assert_eq!(dn, 0.0);
        // log N(y | μ₋, σ₋² + σ²), differentiated in log σ²
        let v = 0.6 + 0.4;
        let expect = 0.4 * (-0.5 / v + 0.5 * (1.0f64 - 0.3).powi(2) / (v * v));
        assert!((ds - expect).abs() < 1e-5);

        let p = StudentTParams::new(2.5, 0.1).unwrap();
        for eta in [0.5, 1.0] {
            let (ds, dn) = tilted_moments_paramgrad(&c, 1.7, &p, eta).unwrap();
            let h = 1e-5;
            let logz = |q: &StudentTParams| tilted_moments(&c, 1.7, q, eta).unwrap().log_zhat;
            let mut a = p.clone();
            let mut b = p.clone();
            a.log_sigma2 += h;
            b.log_sigma2 -= h;
            let fds = (logz(&a) - logz(&b)) / (2.0 * h);
            let mut a = p.clone();
            let mut b = p.clone();
            a.loglog_nu += h;
            b.loglog_nu -= h;
            let fdn = (logz(&a) - logz(&b)) / (2.0 * h);
            assert!(((ds - fds) / fds).abs() < 1e-4, "σ: {ds} vs {fds}");
            assert!(((dn - fdn) / fdn).abs() < 1e-4, "ν: {dn} vs {fdn}");
        }
    }
}
