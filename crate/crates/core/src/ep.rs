//! Expectation propagation for the Student-t model.
//!
//! Sites are unnormalized Gaussians `Z̃ᵢ exp(ν̃ᵢ fᵢ − τ̃ᵢ fᵢ² / 2)`. Site
//! precisions may be negative; cavity precisions `τ₋ᵢ = τ_sᵢ − η τ̃ᵢ` are kept
//! positive at every accepted state.
//!
//! Three schedules are provided:
//!
//! * damped parallel sweeps,
//! * damped sequential sweeps with rank-one posterior updates,
//! * the robust driver: a few damped parallel sweeps followed by a double-loop
//!   search in which the inner loop ascends `−log Z_EP` over the sites with the
//!   marginal anchors `λ_s` fixed, and the outer loop resets `λ_s` to the current
//!   posterior marginals.
//!
//! In the inner loop every step is verified on the objective: the step size is
//! halved first and then chosen by cubic interpolation with the analytic
//! directional derivative.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{kernel_matrix, kernel_matrix_grads, InputMatrix, KernelError, KernelParams};
use crate::likelihood::{
    tilted_moments, tilted_moments_paramgrad, Cavity, LikelihoodError, StudentTParams, TiltedMoments,
};
use crate::linalg::{split_refresh, LinalgError, PosteriorApprox, SymMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest step size tried before giving up.
pub const MIN_STEP: f64 = 1e-6;
/// Sufficient-increase constant of the inner step search.
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EpError {
    #[error("cavity precision {tau:e} at site {index} is not positive")]
    NegativeCavityPrecision { index: usize, tau: f64 },
    #[error("objective undefined: some cavity precision is not positive")]
    ObjectiveUndefined,
    #[error("no improving step size >= {MIN_STEP:e} found")]
    StepFailure,
    #[error("outer refresh gives a non-positive cavity precision at site {index}")]
    NegativeCavityAfterRefresh { index: usize },
    #[error("EP did not converge after {} sweeps (residual {:e})", .0.sweeps, .0.residual)]
    NotConverged(Box<EpRun>),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid EP configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} targets for {1} inputs")]
    DimensionMismatch(usize, usize),
}

/// Natural parameters of the site approximations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    pub tau_tilde: Vec<f64>,
    pub nu_tilde: Vec<f64>,
    /// `log Z̃ᵢ`; filled when a run finishes.
    pub log_ztilde: Vec<f64>,
}

impl SiteSet {
    pub fn zeros(n: usize) -> Self {
        SiteSet {
            tau_tilde: vec![0.0; n],
            nu_tilde: vec![0.0; n],
            log_ztilde: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tau_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_tilde.is_empty()
    }

    fn stepped(&self, dir: &[(f64, f64)], delta: f64) -> SiteSet {
        let mut s = self.clone();
        for (i, (dt, dn)) in dir.iter().enumerate() {
            s.tau_tilde[i] += delta * dt;
            s.nu_tilde[i] += delta * dn;
        }
        s
    }
}

/// Marginal anchors `q_sᵢ(fᵢ)` in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    pub tau_s: Vec<f64>,
    pub nu_s: Vec<f64>,
}

impl MarginalSet {
    pub fn from_posterior(post: &PosteriorApprox) -> Self {
        let n = post.len();
        let mut tau_s = Vec::with_capacity(n);
        let mut nu_s = Vec::with_capacity(n);
        for i in 0..n {
            let (m, v) = post.marginal(i);
            tau_s.push(1.0 / v);
            nu_s.push(m / v);
        }
        MarginalSet { tau_s, nu_s }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpConfig {
    /// Fraction `η ∈ (0, 1]`.
    pub eta: f64,
    /// Damping `δ ∈ (0, 1]`.
    pub delta_init: f64,
    /// Parallel sweeps before the double loop starts.
    pub n_parallel_init: usize,
    /// Inner-loop steps per outer refresh.
    pub inner_max: usize,
    /// Step halvings before cubic interpolation.
    pub stepsearch_max: usize,
    pub tol_consistency: f64,
    pub tol_objective: f64,
    pub max_sweeps: usize,
    /// Sites whose precisions are recorded in the trace; empty means the first eight.
    pub watched: Vec<usize>,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            eta: 1.0,
            delta_init: 0.8,
            n_parallel_init: 10,
            inner_max: 2,
            stepsearch_max: 2,
            tol_consistency: 1e-4,
            tol_objective: 1e-9,
            max_sweeps: 1000,
            watched: Vec::new(),
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<(), EpError> {
        let bad = |m: &str| Err(EpError::InvalidConfig(m.to_string()));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.delta_init > 0.0 && self.delta_init <= 1.0) {
            return bad("delta must lie in (0, 1]");
        }
        if !(self.tol_consistency > 0.0) || !(self.tol_objective >= 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps must be positive");
        }
        if self.inner_max == 0 {
            return bad("inner_max must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceStatus {
    Parallel,
    Sequential,
    DoubleLoopInner,
    OuterRefresh,
    Rejected,
}

impl TraceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceStatus::Parallel => "parallel",
            TraceStatus::Sequential => "sequential",
            TraceStatus::DoubleLoopInner => "double-loop-inner",
            TraceStatus::OuterRefresh => "outer-refresh",
            TraceStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpTraceRecord {
    pub sweep: usize,
    /// `−log Z_EP`, NaN where some cavity precision is not positive.
    pub neg_log_zep: f64,
    pub delta: f64,
    pub status: TraceStatus,
    pub eta: f64,
    pub tau: Vec<f64>,
}

/// Per-sweep history of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpTrace {
    pub watched: Vec<usize>,
    pub records: Vec<EpTraceRecord>,
}

impl EpTrace {
    pub fn new(watched: Vec<usize>) -> Self {
        EpTrace {
            watched,
            records: Vec::new(),
        }
    }

    fn push(&mut self, status: TraceStatus, neg_log_zep: f64, delta: f64, eta: f64, sites: &SiteSet) {
        let tau = self.watched.iter().map(|&i| sites.tau_tilde[i]).collect();
        self.records.push(EpTraceRecord {
            sweep: self.records.len() + 1,
            neg_log_zep,
            delta,
            status,
            eta,
            tau,
        });
    }

    pub fn has_undefined_objective(&self) -> bool {
        self.records.iter().any(|r| r.neg_log_zep.is_nan())
    }

    /// Objective values of each double-loop segment: the outer-refresh value
    /// followed by the accepted inner steps.
    pub fn inner_segments(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for r in &self.records {
            match r.status {
                TraceStatus::OuterRefresh => out.push(vec![r.neg_log_zep]),
                TraceStatus::DoubleLoopInner => {
                    if let Some(seg) = out.last_mut() {
                        seg.push(r.neg_log_zep);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn count(&self, status: TraceStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    /// CSV with columns `sweep,neg_log_zep,delta,status,eta,tau_<i>...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec![
            "sweep".to_string(),
            "neg_log_zep".to_string(),
            "delta".to_string(),
            "status".to_string(),
            "eta".to_string(),
        ];
        header.extend(self.watched.iter().map(|i| format!("tau_{i}")));
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.sweep.to_string(),
                fmt_float(r.neg_log_zep),
                fmt_float(r.delta),
                r.status.as_str().to_string(),
                fmt_float(r.eta),
            ];
            row.extend(r.tau.iter().map(|t| fmt_float(*t)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.10e}")
    }
}

/// Data, covariance and likelihood of one EP problem.
#[derive(Debug, Clone)]
pub struct EpProblem {
    pub x: InputMatrix,
    pub y: Vec<f64>,
    pub kernel: KernelParams,
    pub lik: StudentTParams,
    /// Prior covariance with jitter.
    pub k: SymMatrix,
}

impl EpProblem {
    pub fn new(x: InputMatrix, y: Vec<f64>, kernel: KernelParams, lik: StudentTParams) -> Result<Self, EpError> {
        if x.nrows() != y.len() {
            return Err(EpError::DimensionMismatch(y.len(), x.nrows()));
        }
        let k = kernel_matrix(&x, &kernel)?.with_jitter();
        Ok(EpProblem { x, y, kernel, lik, k })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Sites together with their posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub sites: SiteSet,
    pub posterior: PosteriorApprox,
    pub eta: f64,
}

impl EpState {
    pub fn prior(problem: &EpProblem, eta: f64) -> Result<Self, EpError> {
        Self::from_sites(problem, SiteSet::zeros(problem.len()), eta)
    }

    pub fn from_sites(problem: &EpProblem, sites: SiteSet, eta: f64) -> Result<Self, EpError> {
        let posterior = split_refresh(&problem.k, &sites)?;
        Ok(EpState { sites, posterior, eta })
    }
}

/// `τ₋ = τ_s − η τ̃`, `ν₋ = ν_s − η ν̃`.
pub fn cavity(marginal: (f64, f64), site: (f64, f64), eta: f64) -> Result<Cavity, EpError> {
    let tau_neg = marginal.0 - eta * site.0;
    let nu_neg = marginal.1 - eta * site.1;
    if !(tau_neg > 0.0) || !tau_neg.is_finite() {
        return Err(EpError::NegativeCavityPrecision { index: 0, tau: tau_neg });
    }
    Ok(Cavity { tau_neg, nu_neg })
}

/// Damped fractional site increments `(Δτ̃, Δν̃)` from tilted moments and the
/// current marginal `(μ, σ²)`.
pub fn site_delta(tilted: &TiltedMoments, marginal: (f64, f64), delta: f64, eta: f64) -> (f64, f64) {
    let (mu, s2) = marginal;
    let step = delta / eta;
    let dtau = step * (1.0 / tilted.sigma2_hat - 1.0 / s2);
    let dnu = step * (tilted.mu_hat / tilted.sigma2_hat - mu / s2);
    (dtau, dnu)
}

/// `log ∫ exp(ν f − τ f² / 2) df`.
fn log_partition(tau: f64, nu: f64) -> f64 {
    0.5 * (LN_2PI - tau.ln()) + 0.5 * nu * nu / tau
}

/// Tilted moments for every site at the cavities implied by `anchors`.
#[derive(Debug, Clone)]
struct Evaluation {
    cavities: Vec<Option<Cavity>>,
    tilted: Vec<Option<TiltedMoments>>,
    /// `−log Z_EP` with the given anchors; NaN when a cavity is invalid.
    objective: f64,
    /// Largest mean or variance mismatch between tilted and posterior marginals.
    residual: f64,
}

impl Evaluation {
    fn complete(&self) -> bool {
        self.tilted.iter().all(Option::is_some)
    }

    fn log_ztilde(&self, anchors: &MarginalSet, eta: f64) -> Vec<f64> {
        self.tilted
            .iter()
            .zip(&self.cavities)
            .enumerate()
            .map(|(i, (t, c))| match (t, c) {
                (Some(t), Some(c)) => {
                    (t.log_zhat - log_partition(anchors.tau_s[i], anchors.nu_s[i]) + log_partition(c.tau_neg, c.nu_neg))
                        / eta
                }
                _ => f64::NAN,
            })
            .collect()
    }
}

/// `log ∫ p(f) Π exp(ν̃ᵢ fᵢ − τ̃ᵢ fᵢ² / 2) df = −½ log|I + K T| + ½ ν̃ᵀ m`.
fn gaussian_part(post: &PosteriorApprox, sites: &SiteSet) -> f64 {
    let quad: f64 = sites.nu_tilde.iter().zip(post.mean.iter()).map(|(a, b)| a * b).sum();
    -0.5 * post.logdet + 0.5 * quad
}

fn evaluate(problem: &EpProblem, state: &EpState, anchors: &MarginalSet) -> Result<Evaluation, EpError> {
    let n = problem.len();
    let eta = state.eta;
    let sites = &state.sites;
    let cavities: Vec<Option<Cavity>> = (0..n)
        .map(|i| {
            cavity(
                (anchors.tau_s[i], anchors.nu_s[i]),
                (sites.tau_tilde[i], sites.nu_tilde[i]),
                eta,
            )
            .ok()
        })
        .collect();
    let tilted: Vec<Option<TiltedMoments>> = cavities
        .par_iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(c) => tilted_moments(c, problem.y[i], &problem.lik, eta).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_, _>>()?;
    let mut residual: f64 = 0.0;
    for (i, t) in tilted.iter().enumerate() {
        match t {
            Some(t) => {
                let (m, v) = state.posterior.marginal(i);
                residual = residual.max((t.mu_hat - m).abs()).max((t.sigma2_hat - v).abs());
            }
            None => residual = f64::INFINITY,
        }
    }
    let mut eval = Evaluation {
        cavities,
        tilted,
        objective: f64::NAN,
        residual,
    };
    if eval.complete() {
        let sum: f64 = eval.log_ztilde(anchors, eta).iter().sum();
        eval.objective = -(sum + gaussian_part(&state.posterior, sites));
    }
    Ok(eval)
}

/// `−log Z_EP` at the state's own marginals.
pub fn ep_objective(problem: &EpProblem, state: &EpState) -> Result<f64, EpError> {
    let anchors = MarginalSet::from_posterior(&state.posterior);
    let eval = evaluate(problem, state, &anchors)?;
    if eval.objective.is_nan() {
        return Err(EpError::ObjectiveUndefined);
    }
    Ok(eval.objective)
}

/// Result of one parallel sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub state: EpState,
    pub accepted: bool,
    /// Step size actually applied.
    pub delta: f64,
}

fn parallel_update(problem: &EpProblem, state: &EpState, eval: &Evaluation, delta: f64) -> SweepOutcome {
    let n = problem.len();
    let eta = state.eta;
    let active: Vec<bool> = eval.tilted.iter().map(Option::is_some).collect();
    let mut d = delta;
    loop {
        let mut sites = state.sites.clone();
        for i in 0..n {
            if let Some(t) = &eval.tilted[i] {
                let (dt, dn) = site_delta(t, state.posterior.marginal(i), d, eta);
                sites.tau_tilde[i] += dt;
                sites.nu_tilde[i] += dn;
            }
        }
        let post = match split_refresh(&problem.k, &sites) {
            Ok(p) => p,
            Err(_) => {
                return SweepOutcome {
                    state: state.clone(),
                    accepted: false,
                    delta: d,
                }
            }
        };
        let cavities_ok = (0..n).all(|i| !active[i] || 1.0 / post.cov[(i, i)] - eta * sites.tau_tilde[i] > 0.0);
        if cavities_ok {
            return SweepOutcome {
                state: EpState {
                    sites,
                    posterior: post,
                    eta,
                },
                accepted: true,
                delta: d,
            };
        }
        d *= 0.5;
        if d < MIN_STEP {
            return SweepOutcome {
                state: state.clone(),
                accepted: false,
                delta: d,
            };
        }
    }
}

/// One damped parallel sweep. Sites whose cavity precision is not positive
/// are left unchanged; `δ` is halved until all other new cavities are positive.
pub fn parallel_sweep(problem: &EpProblem, state: &EpState, delta: f64) -> Result<SweepOutcome, EpError> {
    let anchors = MarginalSet::from_posterior(&state.posterior);
    let eval = evaluate(problem, state, &anchors)?;
    Ok(parallel_update(problem, state, &eval, delta))
}

/// Result of one sequential sweep.
#[derive(Debug, Clone)]
pub struct SequentialOutcome {
    pub state: EpState,
    /// Sites left unchanged because of a non-positive cavity precision.
    pub skipped: usize,
}

/// One damped sequential sweep in the given site order.
pub fn sequential_sweep(
    problem: &EpProblem,
    state: &EpState,
    delta: f64,
    order: &[usize],
) -> Result<SequentialOutcome, EpError> {
    let n = problem.len();
    let eta = state.eta;
    let block = (n / 4).max(1);
    let mut sites = state.sites.clone();
    let mut post = state.posterior.clone();
    let mut skipped = 0;
    let mut since_refresh = 0;
    for &i in order {
        let (m, v) = post.marginal(i);
        let c = match cavity((1.0 / v, m / v), (sites.tau_tilde[i], sites.nu_tilde[i]), eta) {
            Ok(c) => c,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let t = tilted_moments(&c, problem.y[i], &problem.lik, eta)?;
        let mut d = delta;
        let step = loop {
            let (dt, dn) = site_delta(&t, (m, v), d, eta);
            let denom = 1.0 + dt * v;
            if !(denom > 0.0) {
                break None;
            }
            let new_cavity = (1.0 / v + dt) - eta * (sites.tau_tilde[i] + dt);
            if new_cavity > 0.0 {
                break Some((dt, dn, denom));
            }
            d *= 0.5;
            if d < MIN_STEP {
                break None;
            }
        };
        let Some((dt, dn, denom)) = step else {
            skipped += 1;
            continue;
        };
        let s = post.cov.as_matrix().column(i).clone_owned();
        post.cov.rank_one_update(dt / denom, &s);
        post.mean += &s * ((dn - dt * m) / denom);
        post.logdet += denom.ln();
        sites.tau_tilde[i] += dt;
        sites.nu_tilde[i] += dn;
        since_refresh += 1;
        if since_refresh >= block {
            since_refresh = 0;
            if let Ok(p) = split_refresh(&problem.k, &sites) {
                post = p;
            }
        }
    }
    if let Ok(p) = split_refresh(&problem.k, &sites) {
        post = p;
    }
    Ok(SequentialOutcome {
        state: EpState {
            sites,
            posterior: post,
            eta,
        },
        skipped,
    })
}

/// `τ_sᵢ ← 1/Σᵢᵢ`, `ν_sᵢ ← mᵢ/Σᵢᵢ`.
pub fn outer_refresh(state: &EpState) -> Result<MarginalSet, EpError> {
    let anchors = MarginalSet::from_posterior(&state.posterior);
    for i in 0..anchors.tau_s.len() {
        if !(anchors.tau_s[i] - state.eta * state.sites.tau_tilde[i] > 0.0) {
            return Err(EpError::NegativeCavityAfterRefresh { index: i });
        }
    }
    Ok(anchors)
}

/// Refreshes only the anchors whose new cavity stays positive.
fn partial_refresh(state: &EpState, old: &MarginalSet) -> MarginalSet {
    let fresh = MarginalSet::from_posterior(&state.posterior);
    let mut out = old.clone();
    for i in 0..fresh.tau_s.len() {
        if fresh.tau_s[i] - state.eta * state.sites.tau_tilde[i] > 0.0 {
            out.tau_s[i] = fresh.tau_s[i];
            out.nu_s[i] = fresh.nu_s[i];
        }
    }
    out
}

/// `d(−log Z_EP)/dδ` along `dir` with the anchors fixed.
fn directional_derivative(eval: &Evaluation, post: &PosteriorApprox, dir: &[(f64, f64)]) -> f64 {
    let mut g = 0.0;
    for (i, (dt, dn)) in dir.iter().enumerate() {
        if let Some(t) = &eval.tilted[i] {
            let (m, v) = post.marginal(i);
            g += (t.mu_hat - m) * dn - 0.5 * (t.sigma2_hat + t.mu_hat * t.mu_hat - v - m * m) * dt;
        }
    }
    g
}

/// Maximizer of the cubic through `(0, f0, g0)` and `(d1, f1, g1)`, kept inside `[0.1 d1, 0.9 d1]`.
fn cubic_step(f0: f64, g0: f64, d1: f64, f1: f64, g1: f64) -> f64 {
    // Minimize φ = −F.
    let (p0, q0, p1, q1) = (-f0, -g0, -f1, -g1);
    let e1 = q0 + q1 - 3.0 * (p0 - p1) / (0.0 - d1);
    let disc = e1 * e1 - q0 * q1;
    let cand = if disc >= 0.0 {
        let e2 = disc.sqrt();
        d1 - d1 * (q1 + e2 - e1) / (q1 - q0 + 2.0 * e2)
    } else {
        f64::NAN
    };
    if cand.is_finite() {
        cand.clamp(0.1 * d1, 0.9 * d1)
    } else {
        0.5 * d1
    }
}

/// Result of one inner-loop step.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub state: EpState,
    pub improved: bool,
    pub delta: f64,
    pub neg_log_zep: f64,
}

struct Trial {
    state: EpState,
    eval: Evaluation,
    g: f64,
}

fn try_step(
    problem: &EpProblem,
    state: &EpState,
    anchors: &MarginalSet,
    dir: &[(f64, f64)],
    delta: f64,
) -> Option<Trial> {
    let sites = state.sites.stepped(dir, delta);
    let posterior = split_refresh(&problem.k, &sites).ok()?;
    let next = EpState {
        sites,
        posterior,
        eta: state.eta,
    };
    let eval = evaluate(problem, &next, anchors).ok()?;
    if !eval.objective.is_finite() {
        return None;
    }
    let g = directional_derivative(&eval, &next.posterior, dir);
    Some(Trial { state: next, eval, g })
}

fn inner_step_eval(
    problem: &EpProblem,
    state: &EpState,
    anchors: &MarginalSet,
    eval: &Evaluation,
    delta0: f64,
    stepsearch_max: usize,
    tol_objective: f64,
) -> Result<(InnerOutcome, Option<Evaluation>), EpError> {
    let n = problem.len();
    let eta = state.eta;
    let f0 = eval.objective;
    if !f0.is_finite() {
        return Err(EpError::ObjectiveUndefined);
    }
    let dir: Vec<(f64, f64)> = (0..n)
        .map(|i| match &eval.tilted[i] {
            Some(t) => site_delta(t, state.posterior.marginal(i), 1.0, eta),
            None => (0.0, 0.0),
        })
        .collect();
    let unchanged = InnerOutcome {
        state: state.clone(),
        improved: false,
        delta: 0.0,
        neg_log_zep: f0,
    };
    let g0 = directional_derivative(eval, &state.posterior, &dir);
    if dir.iter().all(|&(a, b)| a == 0.0 && b == 0.0) || !(g0 > 0.0) {
        return Ok((unchanged, None));
    }
    // Cavity positivity is checked first since it needs no quadrature.
    let mut delta = delta0;
    while (0..n).any(|i| !(anchors.tau_s[i] - eta * (state.sites.tau_tilde[i] + delta * dir[i].0) > 0.0)) {
        delta *= 0.5;
        if delta < MIN_STEP {
            return Err(EpError::StepFailure);
        }
    }
    let accept = |t: Trial, delta: f64| {
        let f = t.eval.objective;
        Ok((
            InnerOutcome {
                state: t.state,
                improved: true,
                delta,
                neg_log_zep: f,
            },
            Some(t.eval),
        ))
    };
    // A real increase is accepted; within the tolerance only a step that stays
    // short of the line maximum is, or roundoff-level overshoots accumulate.
    let good = |t: &Trial, delta: f64| {
        let f = t.eval.objective;
        f >= f0 + ARMIJO * delta * g0 || (f >= f0 - tol_objective && t.g >= 0.0)
    };
    let mut last: Option<(f64, f64, f64)> = None;
    for k in 0..=stepsearch_max {
        if let Some(t) = try_step(problem, state, anchors, &dir, delta) {
            if good(&t, delta) {
                return accept(t, delta);
            }
            last = Some((delta, t.eval.objective, t.g));
        } else {
            last = None;
        }
        if k < stepsearch_max {
            delta *= 0.5;
        }
    }
    loop {
        delta = match last {
            Some((d1, f1, g1)) => cubic_step(f0, g0, d1, f1, g1),
            None => 0.5 * delta,
        };
        if delta < MIN_STEP {
            return Err(EpError::StepFailure);
        }
        match try_step(problem, state, anchors, &dir, delta) {
            Some(t) if good(&t, delta) => return accept(t, delta),
            Some(t) => last = Some((delta, t.eval.objective, t.g)),
            None => last = None,
        }
    }
}

/// One inner-loop step with the anchors fixed. The step is accepted only if
/// `−log Z_EP` does not decrease by more than `tol_objective`.
pub fn inner_step(
    problem: &EpProblem,
    state: &EpState,
    anchors: &MarginalSet,
    config: &EpConfig,
) -> Result<InnerOutcome, EpError> {
    let eval = evaluate(problem, state, anchors)?;
    inner_step_eval(
        problem,
        state,
        anchors,
        &eval,
        config.delta_init,
        config.stepsearch_max,
        config.tol_objective,
    ).map(|r| r.0)
}

/// Update schedule of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Damped parallel sweeps followed by the double loop.
    Robust,
    /// Damped parallel sweeps only.
    Parallel,
    /// Damped sequential sweeps in the given order (natural order when empty).
    Sequential(Vec<usize>),
}

/// Outcome of an EP run.
#[derive(Debug, Clone)]
pub struct EpRun {
    pub sites: SiteSet,
    pub posterior: PosteriorApprox,
    /// `log Z_EP` at the final state; NaN if undefined.
    pub log_zep: f64,
    pub trace: EpTrace,
    pub converged: bool,
    pub residual: f64,
    /// Fraction in use at the end (the driver may lower it).
    pub eta: f64,
    pub sweeps: usize,
    pub outer_iterations: usize,
    pub double_loop: bool,
}

impl EpRun {
    pub fn state(&self) -> EpState {
        EpState {
            sites: self.sites.clone(),
            posterior: self.posterior.clone(),
            eta: self.eta,
        }
    }

    /// Cavities at the final marginals.
    pub fn cavities(&self) -> Vec<Option<Cavity>> {
        let anchors = MarginalSet::from_posterior(&self.posterior);
        (0..self.sites.len())
            .map(|i| {
                cavity(
                    (anchors.tau_s[i], anchors.nu_s[i]),
                    (self.sites.tau_tilde[i], self.sites.nu_tilde[i]),
                    self.eta,
                )
                .ok()
            })
            .collect()
    }
}

struct Driver<'a> {
    problem: &'a EpProblem,
    config: &'a EpConfig,
    trace: EpTrace,
    sweeps: usize,
    outer: usize,
    double_loop: bool,
}

impl<'a> Driver<'a> {
    fn finish(self, state: EpState, eval: Evaluation, converged: bool) -> Result<EpRun, EpError> {
        let anchors = MarginalSet::from_posterior(&state.posterior);
        let mut sites = state.sites;
        sites.log_ztilde = eval.log_ztilde(&anchors, state.eta);
        let run = EpRun {
            sites,
            posterior: state.posterior,
            log_zep: -eval.objective,
            trace: self.trace,
            converged,
            residual: eval.residual,
            eta: state.eta,
            sweeps: self.sweeps,
            outer_iterations: self.outer,
            double_loop: self.double_loop,
        };
        if converged {
            Ok(run)
        } else {
            Err(EpError::NotConverged(Box::new(run)))
        }
    }

    fn record(&mut self, status: TraceStatus, objective: f64, delta: f64, state: &EpState) {
        self.sweeps += 1;
        self.trace.push(status, objective, delta, state.eta, &state.sites);
    }

    fn budget_left(&self) -> bool {
        self.sweeps < self.config.max_sweeps
    }

    fn converged(&self, eval: &Evaluation) -> bool {
        eval.residual < self.config.tol_consistency
    }

    fn parallel(mut self, mut state: EpState) -> Result<EpRun, EpError> {
        let problem = self.problem;
        let mut eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
        while !self.converged(&eval) && self.budget_left() {
            let mut d = self.config.delta_init;
            let out = loop {
                let out = parallel_update(problem, &state, &eval, d);
                if out.accepted || d < MIN_STEP {
                    break out;
                }
                d *= 0.5;
            };
            if !out.accepted {
                self.record(TraceStatus::Rejected, eval.objective, out.delta, &state);
                break;
            }
            state = out.state;
            eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
            self.record(TraceStatus::Parallel, eval.objective, out.delta, &state);
        }
        let c = self.converged(&eval);
        self.finish(state, eval, c)
    }

    fn sequential(mut self, mut state: EpState, order: &[usize]) -> Result<EpRun, EpError> {
        let problem = self.problem;
        let natural: Vec<usize> = (0..problem.len()).collect();
        let order = if order.is_empty() { &natural[..] } else { order };
        let mut eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
        while !self.converged(&eval) && self.budget_left() {
            state = sequential_sweep(problem, &state, self.config.delta_init, order)?.state;
            eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
            self.record(TraceStatus::Sequential, eval.objective, self.config.delta_init, &state);
        }
        let c = self.converged(&eval);
        self.finish(state, eval, c)
    }

    fn robust(mut self, mut state: EpState) -> Result<EpRun, EpError> {
        let problem = self.problem;
        let config = self.config;
        let mut eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
        for _ in 0..config.n_parallel_init {
            if self.converged(&eval) || !self.budget_left() {
                break;
            }
            let out = parallel_update(problem, &state, &eval, config.delta_init);
            if !out.accepted {
                self.record(TraceStatus::Rejected, eval.objective, out.delta, &state);
                break;
            }
            state = out.state;
            eval = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
            self.record(TraceStatus::Parallel, eval.objective, out.delta, &state);
        }
        if self.converged(&eval) {
            return self.finish(state, eval, true);
        }
        self.double_loop = true;
        let mut anchors = MarginalSet::from_posterior(&state.posterior);
        loop {
            let mut full = true;
            anchors = match outer_refresh(&state) {
                Ok(a) => a,
                Err(EpError::NegativeCavityAfterRefresh { .. }) if state.eta > 0.5 => {
                    state.eta = (0.5 * state.eta).max(0.5);
                    match outer_refresh(&state) {
                        Ok(a) => a,
                        Err(_) => {
                            full = false;
                            partial_refresh(&state, &anchors)
                        }
                    }
                }
                Err(_) => {
                    full = false;
                    partial_refresh(&state, &anchors)
                }
            };
            // The old anchors may be invalid for a lowered fraction.
            if !full && (0..problem.len()).any(|i| !(anchors.tau_s[i] - state.eta * state.sites.tau_tilde[i] > 0.0)) {
                let e = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
                return self.finish(state, e, false);
            }
            eval = evaluate(problem, &state, &anchors)?;
            self.outer += 1;
            self.record(TraceStatus::OuterRefresh, eval.objective, 0.0, &state);
            if full && self.converged(&eval) {
                return self.finish(state, eval, true);
            }
            if !self.budget_left() {
                break;
            }
            for _ in 0..config.inner_max {
                if !self.budget_left() {
                    break;
                }
                match inner_step_eval(
                    problem,
                    &state,
                    &anchors,
                    &eval,
                    config.delta_init,
                    config.stepsearch_max,
                    config.tol_objective,
                ) {
                    Ok((out, next)) => {
                        if !out.improved {
                            break;
                        }
                        state = out.state;
                        if let Some(e) = next {
                            eval = e;
                        }
                        self.record(TraceStatus::DoubleLoopInner, out.neg_log_zep, out.delta, &state);
                    }
                    Err(EpError::StepFailure) => {
                        self.record(TraceStatus::Rejected, eval.objective, 0.0, &state);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !self.budget_left() {
                break;
            }
        }
        let e = evaluate(problem, &state, &MarginalSet::from_posterior(&state.posterior))?;
        let c = self.converged(&e);
        self.finish(state, e, c)
    }
}

/// Runs EP with the given schedule, starting from `init` sites when they give
/// a valid posterior and from the prior otherwise.
pub fn run_schedule(
    problem: &EpProblem,
    config: &EpConfig,
    schedule: &Schedule,
    init: Option<&SiteSet>,
) -> Result<EpRun, EpError> {
    config.validate()?;
    let n = problem.len();
    let watched = if config.watched.is_empty() {
        (0..n.min(8)).collect()
    } else {
        config.watched.iter().copied().filter(|&i| i < n).take(8).collect()
    };
    let state = match init {
        Some(s) if s.len() == n => match EpState::from_sites(problem, s.clone(), config.eta) {
            Ok(st) if outer_refresh(&st).is_ok() => st,
            _ => EpState::prior(problem, config.eta)?,
        },
        _ => EpState::prior(problem, config.eta)?,
    };
    let driver = Driver {
        problem,
        config,
        trace: EpTrace::new(watched),
        sweeps: 0,
        outer: 0,
        double_loop: false,
    };
    match schedule {
        Schedule::Robust => driver.robust(state),
        Schedule::Parallel => driver.parallel(state),
        Schedule::Sequential(order) => driver.sequential(state, order),
    }
}

/// The robust driver from the prior.
pub fn run_ep(problem: &EpProblem, config: &EpConfig) -> Result<EpRun, EpError> {
    run_schedule(problem, config, &Schedule::Robust, None)
}

/// Gradient of `log Z_EP` over `[log σ_se², log l_k²..., log σ², log log ν]`
/// with the site parameters held fixed.
pub fn log_zep_gradients(problem: &EpProblem, run: &EpRun, tol_consistency: f64) -> Result<Vec<f64>, EpError> {
    if !(run.residual <= 10.0 * tol_consistency) {
        return Err(EpError::NotConverged(Box::new(run.clone())));
    }
    let post = &run.posterior;
    let alpha = post.alpha(&run.sites);
    let a = post.weight_matrix(&run.sites.tau_tilde);
    let mut grad = Vec::new();
    for dk in kernel_matrix_grads(&problem.x, &problem.kernel)? {
        let dk = dk.as_matrix();
        let quad = alpha.dot(&(dk * &alpha));
        let trace = a.component_mul(dk).sum();
        grad.push(0.5 * quad - 0.5 * trace);
    }
    let cavities = run.cavities();
    let parts: Vec<(f64, f64)> = cavities
        .par_iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(c) => tilted_moments_paramgrad(c, problem.y[i], &problem.lik, run.eta),
            None => Err(LikelihoodError::InvalidCavity(0.0)),
        })
        .collect::<Result<_, _>>()?;
    let (ds, dn) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    grad.push(ds / run.eta);
    grad.push(if problem.lik.nu_fixed { 0.0 } else { dn / run.eta });
    Ok(grad)
}

/// `(K + T⁻¹)⁻¹ μ̃` style weights of a finished run, for prediction.
pub fn predictive_weights(run: &EpRun) -> (DVector<f64>, nalgebra::DMatrix<f64>) {
    (run.posterior.alpha(&run.sites), run.posterior.weight_matrix(&run.sites.tau_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tm(mu_hat: f64, sigma2_hat: f64) -> TiltedMoments {
        TiltedMoments {
            log_zhat: 0.0,
            mu_hat,
            sigma2_hat,
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, nu: f64) -> EpProblem {
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0f64..3.0));
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let kernel = KernelParams::new(rng.random_range(0.5..2.0), &[rng.random_range(0.5..2.0)]);
        let lik = StudentTParams::new(nu, rng.random_range(0.05..0.3)).unwrap();
        EpProblem::new(x, y, kernel, lik).unwrap()
    }

    fn gaussian_log_ml(problem: &EpProblem, sigma2: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = problem.len();
        let k = problem.k.as_matrix();
        let c = k + DMatrix::identity(n, n) * sigma2;
        let chol = c.clone().cholesky().unwrap();
        let y = DVector::from_column_slice(&problem.y);
        let a = chol.solve(&y);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let lml = -0.5 * y.dot(&a) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
        let mean = k * &a;
        let cov = k - k * chol.solve(k);
        (lml, mean, cov)
    }

    #[test]
    fn cavity_cases() {
        let c = cavity((2.0, 0.4), (0.0, 0.0), 1.0).unwrap();
        assert_eq!((c.tau_neg, c.nu_neg), (2.0, 0.4));
        let c = cavity((2.0, 0.0), (1.0, 0.0), 0.5).unwrap();
        assert_eq!(c.tau_neg, 1.5);
        assert!(matches!(
            cavity((1.0, 0.0), (2.0, 0.0), 1.0),
            Err(EpError::NegativeCavityPrecision { .. })
        ));
    }

    #[test]
    fn site_delta_cases() {
        assert_eq!(site_delta(&tm(0.3, 0.7), (0.3, 0.7), 0.8, 0.5), (0.0, 0.0));
        assert_eq!(site_delta(&tm(2.0, 1.0 / 3.0), (0.0, 1.0), 1.0, 1.0), (2.0, 6.0));
        assert_eq!(site_delta(&tm(2.0, 1.0 / 3.0), (0.0, 1.0), 0.5, 1.0), (1.0, 3.0));
    }

    #[test]
    fn unit_fraction_matches_standard_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = tm(rng.random_range(-3.0..3.0), rng.random_range(0.01..4.0));
            let (mu, s2) = (rng.random_range(-3.0..3.0), rng.random_range(0.01..4.0));
            let delta = rng.random_range(0.01..1.0);
            let direct = (
                delta * (1.0 / t.sigma2_hat - 1.0 / s2),
                delta * (t.mu_hat / t.sigma2_hat - mu / s2),
            );
            let got = site_delta(&t, (mu, s2), delta, 1.0);
            assert_eq!(got.0.to_bits(), direct.0.to_bits());
            assert_eq!(got.1.to_bits(), direct.1.to_bits());
        }
    }

    #[test]
    fn gaussian_limit_matches_exact_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let problem = random_problem(&mut rng, 7, 1e8);
        let cfg = EpConfig {
            tol_consistency: 1e-9,
            n_parallel_init: 100,
            ..EpConfig::default()
        };
        let run = run_ep(&problem, &cfg).unwrap();
        let (lml, mean, cov) = gaussian_log_ml(&problem, problem.lik.sigma2());
        assert!((run.log_zep - lml).abs() < 1e-6 * lml.abs().max(1.0));
        assert!((&run.posterior.mean - mean).amax() < 1e-6);
        assert!((run.posterior.cov.as_matrix() - cov).amax() < 1e-6);
        assert!(!run.double_loop);
    }

    #[test]
    fn one_undamped_parallel_sweep_is_exact_in_gaussian_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let problem = random_problem(&mut rng, 6, 1e8);
        let state = EpState::prior(&problem, 1.0).unwrap();
        let out = parallel_sweep(&problem, &state, 1.0).unwrap();
        assert!(out.accepted);
        let (_, mean, _) = gaussian_log_ml(&problem, problem.lik.sigma2());
        assert!((&out.state.posterior.mean - mean).amax() < 1e-6);
        let again = parallel_sweep(&problem, &out.state, 1.0).unwrap();
        let change = again
            .state
            .sites
            .tau_tilde
            .iter()
            .zip(&out.state.sites.tau_tilde)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(change < 1e-5);
    }

    #[test]
    fn single_observation_evidence_matches_grid() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let lik = StudentTParams::new(3.0, 0.2).unwrap();
        let problem = EpProblem::new(x, vec![1.3], KernelParams::new(1.0, &[1.0]), lik.clone()).unwrap();
        let run = run_ep(&problem, &EpConfig::default()).unwrap();
        let kv = problem.k[(0, 0)];
        let (lo, hi, m) = (-12.0, 12.0, 400_001);
        let h = (hi - lo) / (m - 1) as f64;
        let mut z = 0.0;
        for j in 0..m {
            let f = lo + h * j as f64;
            let w = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
            z += w * (crate::likelihood::log_pdf(1.3, f, &lik) - 0.5 * f * f / kv - 0.5 * (LN_2PI + kv.ln())).exp();
        }
        assert!((run.log_zep - (z * h).ln()).abs() < 1e-6);
    }

    #[test]
    fn single_site_sequential_equals_parallel() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let lik = StudentTParams::new(2.0, 0.05).unwrap();
        let problem = EpProblem::new(x, vec![2.5], KernelParams::new(1.5, &[1.0]), lik).unwrap();
        let mut state = EpState::prior(&problem, 1.0).unwrap();
        for _ in 0..5 {
            let p = parallel_sweep(&problem, &state, 0.7).unwrap().state;
            let s = sequential_sweep(&problem, &state, 0.7, &[0]).unwrap().state;
            assert!((p.sites.tau_tilde[0] - s.sites.tau_tilde[0]).abs() < 1e-12);
            assert!((p.sites.nu_tilde[0] - s.sites.nu_tilde[0]).abs() < 1e-12);
            assert!((&p.posterior.mean - &s.posterior.mean).amax() < 1e-12);
            state = p;
        }
    }

    #[test]
    fn inner_step_at_fixed_point_does_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let problem = random_problem(&mut rng, 5, 4.0);
        let cfg = EpConfig {
            tol_consistency: 1e-10,
            n_parallel_init: 100,
            ..EpConfig::default()
        };
        let run = run_ep(&problem, &cfg).unwrap();
        let state = run.state();
        let anchors = outer_refresh(&state).unwrap();
        let out = inner_step(&problem, &state, &anchors, &cfg).unwrap();
        if out.improved {
            let change = (0..5)
                .map(|i| (out.state.sites.tau_tilde[i] - state.sites.tau_tilde[i]).abs())
                .fold(0.0, f64::max);
            assert!(change < 1e-8);
        } else {
            assert_eq!(out.state.sites, state.sites);
        }
    }

    #[test]
    fn inner_steps_never_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(2..=10);
            let nu = rng.random_range(1.5..6.0);
            let mut problem = random_problem(&mut rng, n, nu);
            // Put a few conflicting observations in.
            for i in 0..n / 3 {
                problem.y[i] += rng.random_range(-4.0..4.0);
            }
            let cfg = EpConfig::default();
            let mut state = EpState::prior(&problem, 1.0).unwrap();
            for _ in 0..3 {
                let anchors = match outer_refresh(&state) {
                    Ok(a) => a,
                    Err(_) => break,
                };
                let mut f = evaluate(&problem, &state, &anchors).unwrap().objective;
                for _ in 0..2 {
                    match inner_step(&problem, &state, &anchors, &cfg) {
                        Ok(out) => {
                            let check = evaluate(&problem, &out.state, &anchors).unwrap().objective;
                            assert!(check >= f - cfg.tol_objective, "{check} < {f}");
                            f = check;
                            state = out.state;
                        }
                        Err(EpError::StepFailure) => break,
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn refresh_of_parallel_state_matches_posterior_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let problem = random_problem(&mut rng, 6, 4.0);
        let state = EpState::prior(&problem, 1.0).unwrap();
        let state = parallel_sweep(&problem, &state, 0.8).unwrap().state;
        let a = outer_refresh(&state).unwrap();
        for i in 0..6 {
            assert_eq!(a.tau_s[i], 1.0 / state.posterior.cov[(i, i)]);
            assert_eq!(a.nu_s[i], state.posterior.mean[i] / state.posterior.cov[(i, i)]);
        }
        let b = outer_refresh(&state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn site_normalizers_reproduce_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let problem = random_problem(&mut rng, 6, 1e8);
        let run = run_ep(&problem, &EpConfig::default()).unwrap();
        let s = &run.sites;
        assert!(s.tau_tilde.iter().all(|&t| t > 0.0));
        // Z_EP = Π Z̃ᵢ exp(A(λ̃ᵢ)) N(μ̃ | 0, K + S̃).
        let n = problem.len();
        let mu = DVector::from_fn(n, |i, _| s.nu_tilde[i] / s.tau_tilde[i]);
        let c = problem.k.as_matrix() + DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / s.tau_tilde[i]));
        let chol = c.clone().cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let lognorm = -0.5 * mu.dot(&chol.solve(&mu)) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
        let total: f64 = (0..n).map(|i| s.log_ztilde[i] + log_partition(s.tau_tilde[i], s.nu_tilde[i])).sum::<f64>() + lognorm;
        assert!((total - run.log_zep).abs() < 1e-8, "{total} vs {}", run.log_zep);
    }

    #[test]
    fn gaussian_limit_gradient_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let problem = random_problem(&mut rng, 6, 1e8);
        let cfg = EpConfig {
            tol_consistency: 1e-10,
            n_parallel_init: 100,
            ..EpConfig::default()
        };
        let run = run_ep(&problem, &cfg).unwrap();
        let g = log_zep_gradients(&problem, &run, cfg.tol_consistency).unwrap();
        let s2 = problem.lik.sigma2();
        let n = problem.len();
        let c = problem.k.as_matrix() + DMatrix::identity(n, n) * s2;
        let ci = c.clone().try_inverse().unwrap();
        let y = DVector::from_column_slice(&problem.y);
        let a = &ci * &y;
        let grads = kernel_matrix_grads(&problem.x, &problem.kernel).unwrap();
        let mut expect: Vec<f64> = grads
            .iter()
            .map(|dk| {
                let dk = dk.as_matrix();
                0.5 * a.dot(&(dk * &a)) - 0.5 * (&ci * dk).trace()
            })
            .collect();
        expect.push(0.5 * s2 * (a.dot(&a) - ci.trace()));
        for k in 0..expect.len() {
            assert!((g[k] - expect[k]).abs() < 1e-5, "{k}: {} vs {}", g[k], expect[k]);
        }
    }

    #[test]
    fn fixed_nu_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut problem = random_problem(&mut rng, 5, 4.0);
        problem.lik.nu_fixed = true;
        let run = run_ep(&problem, &EpConfig::default()).unwrap();
        let g = log_zep_gradients(&problem, &run, 1e-4).unwrap();
        assert_eq!(*g.last().unwrap(), 0.0);
    }

    #[test]
    fn trace_csv_layout() {
        let mut t = EpTrace::new(vec![0, 2]);
        let sites = SiteSet {
            tau_tilde: vec![1.0, 2.0, -0.5],
            nu_tilde: vec![0.0; 3],
            log_ztilde: vec![0.0; 3],
        };
        t.push(TraceStatus::Parallel, 1.5, 0.8, 1.0, &sites);
        t.push(TraceStatus::Rejected, f64::NAN, 0.4, 1.0, &sites);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sweep,neg_log_zep,delta,status,eta,tau_0,tau_2");
        assert!(lines[1].starts_with("1,1.5000000000e0,8.0000000000e-1,parallel,"));
        assert!(lines[2].contains(",NaN,"));
        assert!(lines[2].ends_with("-5.0000000000e-1"));
        assert!(t.has_undefined_objective());
    }

    #[test]
    fn config_validation() {
        assert!(EpConfig::default().validate().is_ok());
        for bad in [
            EpConfig { eta: 0.0, ..EpConfig::default() },
            EpConfig { eta: 1.2, ..EpConfig::default() },
            EpConfig { delta_init: 0.0, ..EpConfig::default() },
            EpConfig { max_sweeps: 0, ..EpConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
