//! Covariance functions.
//!
//! Only the squared exponential ships:
//! `k(x, x') = σ_se² exp(−Σ_k (x_k − x'_k)² / (2 l_k²))`,
//! parameterized by `log σ_se²` and `log l_k²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymMatrix;

/// Inputs, one row per point.
pub type InputMatrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("input has {actual} columns but the kernel expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown kernel parameter {0:?}")]
    UnknownParameter(ParamId),
}

/// Identifies one log-space kernel parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    LogMagnitude,
    LogLengthscale(usize),
}

/// A stationary covariance function with log-space parameters.
pub trait Kernel: Send + Sync {
    fn input_dim(&self) -> usize;

    fn n_params(&self) -> usize;

    /// Parameters in the order used by [`Kernel::eval_grad`].
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);

    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// Derivative of `eval` with respect to parameter `which` (an index into `params`).
    fn eval_grad(&self, a: &[f64], b: &[f64], which: usize) -> f64;
}

/// Squared-exponential kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// `log σ_se²`.
    pub log_magnitude: f64,
    /// `log l_k²`, one per input dimension.
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    /// From `σ_se²` and lengthscales `l_k` (not squared).
    pub fn new(magnitude: f64, lengthscales: &[f64]) -> Self {
        KernelParams {
            log_magnitude: magnitude.ln(),
            log_lengthscales: lengthscales.iter().map(|l| (l * l).ln()).collect(),
        }
    }

    pub fn isotropic(magnitude: f64, lengthscale: f64, dim: usize) -> Self {
        Self::new(magnitude, &vec![lengthscale; dim])
    }

    pub fn magnitude(&self) -> f64 {
        self.log_magnitude.exp()
    }

    /// `l_k` (not squared).
    pub fn lengthscale(&self, k: usize) -> f64 {
        (0.5 * self.log_lengthscales[k]).exp()
    }

    pub fn param_index(&self, which: ParamId) -> Result<usize, KernelError> {
        match which {
            ParamId::LogMagnitude => Ok(0),
            ParamId::LogLengthscale(k) if k < self.log_lengthscales.len() => Ok(1 + k),
            other => Err(KernelError::UnknownParameter(other)),
        }
    }

    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        self.log_lengthscales
            .iter()
            .zip(a.iter().zip(b))
            .map(|(ll, (x, y))| (x - y) * (x - y) * (-ll).exp())
            .sum()
    }
}

impl Kernel for KernelParams {
    fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn n_params(&self) -> usize {
        1 + self.log_lengthscales.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = vec![self.log_magnitude];
        p.extend_from_slice(&self.log_lengthscales);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        self.log_magnitude = params[0];
        self.log_lengthscales.copy_from_slice(&params[1..]);
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        (self.log_magnitude - 0.5 * self.scaled_sq_dist(a, b)).exp()
    }

    fn eval_grad(&self, a: &[f64], b: &[f64], which: usize) -> f64 {
        let k = self.eval(a, b);
        if which == 0 {
            k
        } else {
            let d = which - 1;
            let diff = a[d] - b[d];
            k * 0.5 * diff * diff * (-self.log_lengthscales[d]).exp()
        }
    }
}

fn check_dim(x: &InputMatrix, kernel: &impl Kernel) -> Result<(), KernelError> {
    if x.ncols() != kernel.input_dim() {
        return Err(KernelError::DimensionMismatch {
            expected: kernel.input_dim(),
            actual: x.ncols(),
        });
    }
    Ok(())
}

fn rows(x: &InputMatrix) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `K_ij = k(x_i, x_j)`.
pub fn kernel_matrix(x: &InputMatrix, kernel: &impl Kernel) -> Result<SymMatrix, KernelError> {
    check_dim(x, kernel)?;
    let r = rows(x);
    Ok(SymMatrix::from_fn(x.nrows(), |i, j| kernel.eval(&r[i], &r[j])))
}

/// `∂K / ∂θ` for one log-space parameter.
pub fn kernel_matrix_grad(x: &InputMatrix, p: &KernelParams, which: ParamId) -> Result<SymMatrix, KernelError> {
    check_dim(x, p)?;
    let idx = p.param_index(which)?;
    let r = rows(x);
    Ok(SymMatrix::from_fn(x.nrows(), |i, j| p.eval_grad(&r[i], &r[j], idx)))
}

/// All parameter gradients, in `params()` order.
pub fn kernel_matrix_grads(x: &InputMatrix, p: &KernelParams) -> Result<Vec<SymMatrix>, KernelError> {
    (0..p.n_params())
        .map(|idx| {
            let which = if idx == 0 {
                ParamId::LogMagnitude
            } else {
                ParamId::LogLengthscale(idx - 1)
            };
            kernel_matrix_grad(x, p, which)
        })
        .collect()
}

/// `K*_ij = k(x*_i, x_j)`, shape `n* × n`.
pub fn cross_kernel(x: &InputMatrix, xstar: &InputMatrix, kernel: &impl Kernel) -> Result<DMatrix<f64>, KernelError> {
    check_dim(x, kernel)?;
    check_dim(xstar, kernel)?;
    let r = rows(x);
    let rs = rows(xstar);
    Ok(DMatrix::from_fn(xstar.nrows(), x.nrows(), |i, j| kernel.eval(&rs[i], &r[j])))
}
