//! Hyperparameter estimation, the degrees-of-freedom grid and prediction.
//!
//! The objective is the approximate log marginal likelihood under a flat prior
//! on the log-space coordinates `[log σ_se², log l_k²..., log σ², log log ν]`,
//! maximized with BFGS and a backtracking line search. Trial points where the
//! inference fails count as `−∞` so the search backs off instead of aborting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Standardization};
use crate::ep::{log_zep_gradients, run_schedule, EpConfig, EpError, EpProblem, Schedule, SiteSet};
use crate::gaussian::{gaussian_fit, gaussian_log_ml_grad};
use crate::kernels::{cross_kernel, InputMatrix, KernelParams};
use crate::laplace::{laplace_fit, laplace_log_ml_grad};
use crate::likelihood::{tilted_moments, Cavity, LikelihoodError, StudentTParams};
use crate::linalg::split_refresh;

pub const MODEL_VERSION: &str = "robustgp-model/1";

/// Number of degrees-of-freedom values in grid mode.
pub const NU_GRID_SIZE: usize = 15;
pub const NU_GRID_RANGE: (f64, f64) = (1.5, 20.0);

/// Coordinates outside `±THETA_BOUND` are treated as infeasible.
const THETA_BOUND: f64 = 15.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("optimization failed: {0}")]
    OptimizationFailure(String),
    #[error("dimension mismatch: model has {expected} inputs, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported model document version {0:?}")]
    Version(String),
    #[error(transparent)]
    Ep(#[from] EpError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Ep,
    Laplace,
    /// Gaussian observation model; `ν` is ignored.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuMode {
    Fixed(f64),
    Optimized,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub inference: Inference,
    pub nu_mode: NuMode,
    /// EP settings, including the fraction `η`.
    pub ep: EpConfig,
    /// Lengthscale initializations, drawn log-uniform on `[0.3, 3]`.
    pub restarts: usize,
    pub seed: u64,
    /// Stop when the largest gradient entry falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub init_magnitude: f64,
    pub init_sigma: f64,
    pub init_nu: f64,
    /// Scale inputs and targets to zero mean and unit variance before fitting.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            inference: Inference::Ep,
            nu_mode: NuMode::Optimized,
            ep: EpConfig::default(),
            restarts: 3,
            seed: 0,
            grad_tol: 1e-5,
            max_iter: 100,
            init_magnitude: 1.0,
            init_sigma: 0.5,
            init_nu: 4.0,
            standardize: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.ep.validate()?;
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(self.grad_tol > 0.0) {
            return bad("grad_tol must be positive");
        }
        if !(self.init_magnitude > 0.0 && self.init_sigma > 0.0 && self.init_nu > 0.0) {
            return bad("initial values must be positive");
        }
        if let NuMode::Fixed(v) = self.nu_mode {
            if !(v > 0.0 && v.is_finite()) {
                return bad("fixed nu must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kernel: KernelParams,
    pub lik: StudentTParams,
}

/// One Gaussian posterior of a fitted model with its mixture weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub hyper: Hyperparameters,
    pub weight: f64,
    pub log_evidence: f64,
    pub sites: SiteSet,
    pub converged: bool,
    #[serde(skip, default = "empty_vector")]
    alpha: DVector<f64>,
    #[serde(skip, default = "empty_matrix")]
    weights: DMatrix<f64>,
}

fn empty_vector() -> DVector<f64> {
    DVector::zeros(0)
}

fn empty_matrix() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

/// Optimizer summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: String,
    pub inference: Inference,
    pub nu_mode: NuMode,
    pub eta: f64,
    pub hyper: Hyperparameters,
    pub log_evidence: f64,
    pub components: Vec<Component>,
    pub standardization: Standardization,
    /// Training data after standardization, rows of `x`.
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub report: FitReport,
}

fn rows(x: &InputMatrix) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], d: usize) -> InputMatrix {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Coordinates of the optimizer.
#[derive(Debug, Clone, Copy)]
struct Layout {
    dim: usize,
    with_nu: bool,
}

impl Layout {
    fn len(&self) -> usize {
        self.dim + 2 + usize::from(self.with_nu)
    }

    fn pack(&self, h: &Hyperparameters) -> Vec<f64> {
        let mut t = vec![h.kernel.log_magnitude];
        t.extend_from_slice(&h.kernel.log_lengthscales);
        t.push(h.lik.log_sigma2);
        if self.with_nu {
            t.push(h.lik.loglog_nu);
        }
        t
    }

    fn unpack(&self, theta: &[f64], base: &StudentTParams) -> Hyperparameters {
        let kernel = KernelParams {
            log_magnitude: theta[0],
            log_lengthscales: theta[1..=self.dim].to_vec(),
        };
        let mut lik = base.clone();
        lik.log_sigma2 = theta[self.dim + 1];
        if self.with_nu {
            lik.loglog_nu = theta[self.dim + 2];
        }
        Hyperparameters { kernel, lik }
    }

    /// Full gradient `[kernel..., log σ², log log ν]` cut to the free coordinates.
    fn cut(&self, mut g: Vec<f64>) -> Vec<f64> {
        g.truncate(self.len());
        g
    }
}

/// Evaluated objective at one point.
struct Evaluation {
    log_evidence: f64,
    grad: Vec<f64>,
    sites: SiteSet,
}

fn evaluate(
    x: &InputMatrix,
    y: &[f64],
    h: &Hyperparameters,
    layout: Layout,
    config: &FitConfig,
    warm: Option<&SiteSet>,
) -> Option<Evaluation> {
    let problem = EpProblem::new(x.clone(), y.to_vec(), h.kernel.clone(), h.lik.clone()).ok()?;
    let (log_evidence, grad, sites) = match config.inference {
        Inference::Ep => {
            let run = run_schedule(&problem, &config.ep, &Schedule::Robust, warm).ok()?;
            if !run.converged {
                return None;
            }
            let g = log_zep_gradients(&problem, &run, config.ep.tol_consistency).ok()?;
            (run.log_zep, g, run.sites)
        }
        Inference::Laplace => {
            let st = laplace_fit(&problem).ok()?;
            let g = laplace_log_ml_grad(&problem, &st).ok()?;
            (st.log_ql, g, st.sites())
        }
        Inference::Gaussian => {
            let fit = gaussian_fit(&problem).ok()?;
            let g = gaussian_log_ml_grad(&problem, &fit).ok()?;
            (fit.log_ml, g, fit.sites)
        }
    };
    let grad = layout.cut(grad);
    if !log_evidence.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Evaluation {
        log_evidence,
        grad,
        sites,
    })
}

struct Optimum {
    theta: Vec<f64>,
    eval: Evaluation,
    report: FitReport,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS on `−log q` with Armijo backtracking.
fn bfgs(
    mut f: impl FnMut(&[f64], Option<&SiteSet>) -> Option<Evaluation>,
    theta0: Vec<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> Option<Optimum> {
    const C1: f64 = 1e-4;
    const MAX_STEP: f64 = 2.0;
    let n = theta0.len();
    let mut report = FitReport::default();
    let mut x = theta0;
    report.evaluations += 1;
    let mut cur = f(&x, None)?;
    let mut g: Vec<f64> = cur.grad.iter().map(|v| -v).collect();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    while report.iterations < max_iter {
        report.grad_norm = inf_norm(&g);
        if report.grad_norm < grad_tol {
            report.converged = true;
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut p = -(&h * &gv);
        let mut slope = p.dot(&gv);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            p = -gv.clone();
            slope = p.dot(&gv);
        }
        let pmax = p.amax();
        if pmax > MAX_STEP {
            p *= MAX_STEP / pmax;
            slope *= MAX_STEP / pmax;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let xt: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            if xt.iter().all(|v| v.abs() <= THETA_BOUND) {
                report.evaluations += 1;
                if let Some(e) = f(&xt, Some(&cur.sites)) {
                    if -e.log_evidence <= -cur.log_evidence + C1 * t * slope {
                        next = Some((xt, e));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((xt, e)) = next else {
            if fresh {
                break;
            }
            // Retry the iteration along steepest descent.
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        report.iterations += 1;
        let gt: Vec<f64> = e.grad.iter().map(|v| -v).collect();
        let s = DVector::from_iterator(n, xt.iter().zip(x.iter()).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, gt.iter().zip(g.iter()).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            if fresh {
                h *= sy / yv.norm_squared();
                fresh = false;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * yv.transpose();
            h = &a * &h * a.transpose() + rho * &s * s.transpose();
        }
        let decrease = cur.log_evidence - e.log_evidence;
        x = xt;
        g = gt;
        cur = e;
        if decrease.abs() < 1e-12 * (1.0 + cur.log_evidence.abs()) {
            report.grad_norm = inf_norm(&g);
            report.converged = report.grad_norm < grad_tol;
            break;
        }
    }
    report.grad_norm = inf_norm(&g);
    Some(Optimum {
        theta: x,
        eval: cur,
        report,
    })
}

/// `log log ν` values of the grid, evenly spaced.
pub fn nu_grid() -> Vec<f64> {
    let (a, b) = (NU_GRID_RANGE.0.ln().ln(), NU_GRID_RANGE.1.ln().ln());
    (0..NU_GRID_SIZE)
        .map(|j| (a + (b - a) * j as f64 / (NU_GRID_SIZE - 1) as f64).exp().exp())
        .collect()
}

fn component(
    x: &InputMatrix,
    hyper: Hyperparameters,
    sites: SiteSet,
    log_evidence: f64,
    weight: f64,
) -> Result<Component, ModelError> {
    let mut c = Component {
        hyper,
        weight,
        log_evidence,
        sites,
        converged: true,
        alpha: DVector::zeros(0),
        weights: DMatrix::zeros(0, 0),
    };
    c.prepare(x)?;
    Ok(c)
}

impl Component {
    fn prepare(&mut self, x: &InputMatrix) -> Result<(), ModelError> {
        let problem = EpProblem::new(x.clone(), vec![0.0; x.nrows()], self.hyper.kernel.clone(), self.hyper.lik.clone())?;
        let post = split_refresh(&problem.k, &self.sites).map_err(EpError::from)?;
        self.alpha = post.alpha(&self.sites);
        self.weights = post.weight_matrix(&self.sites.tau_tilde);
        Ok(())
    }

    /// Latent mean and variance on the standardized scale.
    fn latent(&self, x: &InputMatrix, xstar: &InputMatrix) -> Result<Vec<(f64, f64)>, ModelError> {
        let ks = cross_kernel(x, xstar, &self.hyper.kernel).map_err(EpError::from)?;
        let kss = self.hyper.kernel.magnitude();
        Ok((0..xstar.nrows())
            .map(|j| {
                let k = ks.row(j).transpose();
                let mean = k.dot(&self.alpha);
                let var = (kss - k.dot(&(&self.weights * &k))).max(0.0);
                (mean, var)
            })
            .collect())
    }
}

fn sample_start(rng: &mut ChaCha8Rng, dim: usize, config: &FitConfig) -> Hyperparameters {
    let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.3f64.ln()..3.0f64.ln()).exp()).collect();
    let nu = match config.nu_mode {
        NuMode::Fixed(v) => v,
        _ => config.init_nu,
    };
    let lik = StudentTParams::new(nu, config.init_sigma * config.init_sigma)
        .expect("validated")
        .with_nu_fixed(!matches!(config.nu_mode, NuMode::Optimized));
    Hyperparameters {
        kernel: KernelParams::new(config.init_magnitude, &ls),
        lik,
    }
}

fn optimize(
    x: &InputMatrix,
    y: &[f64],
    start: &Hyperparameters,
    layout: Layout,
    config: &FitConfig,
    warm: Option<&SiteSet>,
) -> Option<(Hyperparameters, Optimum)> {
    let base = start.lik.clone();
    let theta0 = layout.pack(start);
    let opt = bfgs(
        |theta, w| evaluate(x, y, &layout.unpack(theta, &base), layout, config, w.or(warm)),
        theta0,
        config.grad_tol,
        config.max_iter,
    )?;
    Some((layout.unpack(&opt.theta, &base), opt))
}

/// Fits hyperparameters by maximizing the approximate marginal likelihood.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FittedModel, ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::InvalidConfig("empty data set".to_string()));
    }
    let st = if config.standardize {
        Standardization::fit(data)
    } else {
        Standardization::identity(data.dim())
    };
    let z = st.apply(data);
    let dim = data.dim();
    let with_nu = config.inference != Inference::Gaussian && config.nu_mode == NuMode::Optimized;
    let layout = Layout { dim, with_nu };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<Hyperparameters> = (0..config.restarts).map(|_| sample_start(&mut rng, dim, config)).collect();

    let best_of = |starts: &[Hyperparameters], warm: Option<&SiteSet>| -> Option<(Hyperparameters, Optimum)> {
        let results: Vec<_> = starts.par_iter().map(|s| optimize(&z.x, &z.y, s, layout, config, warm)).collect();
        let n = results.len();
        let mut best: Option<(Hyperparameters, Optimum)> = None;
        let (mut iters, mut evals) = (0, 0);
        for r in results.into_iter().flatten() {
            iters += r.1.report.iterations;
            evals += r.1.report.evaluations;
            if best.as_ref().is_none_or(|b| r.1.eval.log_evidence > b.1.eval.log_evidence) {
                best = Some(r);
            }
        }
        best.map(|(h, mut o)| {
            o.report.iterations = iters;
            o.report.evaluations = evals;
            o.report.restarts = n;
            (h, o)
        })
    };

    let mut components = Vec::new();
    let mut report;
    match config.nu_mode {
        NuMode::Grid if config.inference != Inference::Gaussian => {
            let grid = nu_grid();
            let mut legs = Vec::with_capacity(grid.len());
            let first: Vec<Hyperparameters> = starts
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.lik = StudentTParams::new(grid[0], s.lik.sigma2()).expect("valid").with_nu_fixed(true);
                    s
                })
                .collect();
            let (mut h, mut o) = best_of(&first, None).ok_or_else(|| ModelError::OptimizationFailure("no feasible start".into()))?;
            report = o.report.clone();
            report.converged = o.report.converged;
            legs.push((h.clone(), o.eval.log_evidence, o.eval.sites.clone()));
            for nu in &grid[1..] {
                let mut start = h.clone();
                start.lik = StudentTParams::new(*nu, h.lik.sigma2()).expect("valid").with_nu_fixed(true);
                let warm = o.eval.sites.clone();
                let (h2, o2) = optimize(&z.x, &z.y, &start, layout, config, Some(&warm))
                    .ok_or_else(|| ModelError::OptimizationFailure(format!("grid leg at nu = {nu}")))?;
                report.iterations += o2.report.iterations;
                report.evaluations += o2.report.evaluations;
                report.converged &= o2.report.converged;
                report.grad_norm = report.grad_norm.max(o2.report.grad_norm);
                h = h2;
                o = o2;
                legs.push((h.clone(), o.eval.log_evidence, o.eval.sites.clone()));
            }
            let top = legs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = legs.iter().map(|l| (l.1 - top).exp()).sum();
            for (h, le, sites) in legs {
                let w = (le - top).exp() / total;
                components.push(component(&z.x, h, sites, le, w)?);
            }
        }
        _ => {
            let (h, o) = best_of(&starts, None).ok_or_else(|| ModelError::OptimizationFailure("no feasible start".into()))?;
            report = o.report.clone();
            components.push(component(&z.x, h, o.eval.sites, o.eval.log_evidence, 1.0)?);
        }
    }
    let lead = components
        .iter()
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .expect("at least one component");
    Ok(FittedModel {
        version: MODEL_VERSION.to_string(),
        inference: config.inference,
        nu_mode: config.nu_mode,
        eta: config.ep.eta,
        hyper: lead.hyper.clone(),
        log_evidence: lead.log_evidence,
        standardization: st,
        x_train: rows(&z.x),
        y_train: z.y.clone(),
        components,
        report,
    })
}

/// Builds a model at given hyperparameters without optimization; inputs and
/// targets are used as given.
pub fn fit_fixed(data: &Dataset, hyper: &Hyperparameters, inference: Inference, ep: &EpConfig) -> Result<FittedModel, ModelError> {
    let problem = EpProblem::new(data.x.clone(), data.y.clone(), hyper.kernel.clone(), hyper.lik.clone())?;
    let (log_evidence, sites, converged) = match inference {
        Inference::Ep => match run_schedule(&problem, ep, &Schedule::Robust, None) {
            Ok(r) => (r.log_zep, r.sites, true),
            Err(EpError::NotConverged(r)) => (r.log_zep, r.sites, false),
            Err(e) => return Err(e.into()),
        },
        Inference::Laplace => {
            let st = laplace_fit(&problem).map_err(|e| ModelError::OptimizationFailure(e.to_string()))?;
            (st.log_ql, st.sites(), true)
        }
        Inference::Gaussian => {
            let g = gaussian_fit(&problem).map_err(EpError::from)?;
            (g.log_ml, g.sites, true)
        }
    };
    let mut c = component(&data.x, hyper.clone(), sites, log_evidence, 1.0)?;
    c.converged = converged;
    Ok(FittedModel {
        version: MODEL_VERSION.to_string(),
        inference,
        nu_mode: NuMode::Fixed(hyper.lik.nu()),
        eta: ep.eta,
        hyper: hyper.clone(),
        log_evidence,
        standardization: Standardization::identity(data.dim()),
        x_train: rows(&data.x),
        y_train: data.y.clone(),
        components: vec![c],
        report: FitReport {
            converged,
            ..FitReport::default()
        },
    })
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.standardization.x_mean.len()
    }

    fn train_x(&self) -> InputMatrix {
        matrix(&self.x_train, self.dim())
    }

    fn check_dim(&self, xstar: &InputMatrix) -> Result<(), ModelError> {
        if xstar.ncols() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                actual: xstar.ncols(),
            });
        }
        Ok(())
    }

    /// Per-component latent moments on the standardized scale.
    fn component_latents(&self, xstar: &InputMatrix) -> Result<Vec<Vec<(f64, f64)>>, ModelError> {
        self.check_dim(xstar)?;
        let xs = self.standardization.apply_x(xstar);
        let x = self.train_x();
        self.components.iter().map(|c| c.latent(&x, &xs)).collect()
    }

    /// Mean and variance of the latent function at each row of `xstar`, in
    /// the units of the training targets. Grid models return the moments of
    /// the mixture.
    pub fn predict_latent(&self, xstar: &InputMatrix) -> Result<Vec<(f64, f64)>, ModelError> {
        let per = self.component_latents(xstar)?;
        let (m0, s) = (self.standardization.y_mean, self.standardization.y_scale);
        Ok((0..xstar.nrows())
            .map(|j| {
                let mut mean = 0.0;
                let mut second = 0.0;
                for (c, lat) in self.components.iter().zip(&per) {
                    let (m, v) = lat[j];
                    mean += c.weight * m;
                    second += c.weight * (v + m * m);
                }
                let var = (second - mean * mean).max(0.0);
                (mean * s + m0, var * s * s)
            })
            .collect())
    }

    /// `log q(y* | x*, D)` for each pair, in the units of the training targets.
    pub fn predict_log_density(&self, xstar: &InputMatrix, ystar: &[f64]) -> Result<Vec<f64>, ModelError> {
        if ystar.len() != xstar.nrows() {
            return Err(ModelError::DimensionMismatch {
                expected: xstar.nrows(),
                actual: ystar.len(),
            });
        }
        let per = self.component_latents(xstar)?;
        let ys = self.standardization.apply_y(ystar);
        let log_scale = self.standardization.y_scale.ln();
        let mut out = Vec::with_capacity(ys.len());
        for (j, &y) in ys.iter().enumerate() {
            let mut terms = Vec::with_capacity(self.components.len());
            for (c, lat) in self.components.iter().zip(&per) {
                let (m, v) = lat[j];
                let ld = match self.inference {
                    Inference::Gaussian => {
                        let t = v + c.hyper.lik.sigma2();
                        -0.5 * ((2.0 * std::f64::consts::PI * t).ln() + (y - m) * (y - m) / t)
                    }
                    _ => log_predictive(m, v, y, &c.hyper.lik)?,
                };
                terms.push(c.weight.ln() + ld);
            }
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
            out.push(lse - log_scale);
        }
        Ok(out)
    }

    pub fn predict_density(&self, xstar: &InputMatrix, ystar: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_log_density(xstar, ystar)?.into_iter().map(f64::exp).collect())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<FittedModel, ModelError> {
        let mut m: FittedModel = serde_json::from_str(text)?;
        if m.version != MODEL_VERSION {
            return Err(ModelError::Version(m.version));
        }
        let x = m.train_x();
        for c in &mut m.components {
            c.prepare(&x)?;
        }
        Ok(m)
    }
}

/// `log ∫ t(y | f, ν, σ²) N(f | m, v) df`; the variance is floored so the
/// delta limit is the Student-t log density.
fn log_predictive(m: f64, v: f64, y: f64, lik: &StudentTParams) -> Result<f64, ModelError> {
    let v = v.max(1e-12 * lik.sigma2());
    Ok(tilted_moments(&Cavity::from_moments(m, v), y, lik, 1.0)?.log_zhat)
}

/// Prediction scores on held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub mlpd: f64,
}

/// MAE of the predictive mean (the median of a symmetric predictive) and
/// the mean log predictive density.
pub fn score(model: &FittedModel, test: &Dataset) -> Result<Scores, ModelError> {
    let lat = model.predict_latent(&test.x)?;
    let ld = model.predict_log_density(&test.x, &test.y)?;
    let n = test.len() as f64;
    let mae = lat.iter().zip(&test.y).map(|((m, _), y)| (m - y).abs()).sum::<f64>() / n;
    let mlpd = ld.iter().sum::<f64>() / n;
    Ok(Scores { mae, mlpd })
}
