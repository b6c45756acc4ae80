//! Dense symmetric linear algebra.
//!
//! The central routine is [`split_refresh`], which recomputes the Gaussian
//! posterior `Σ = (K⁻¹ + T)⁻¹`, `m = Σ ν̃` for a diagonal site precision matrix
//! `T = diag(τ̃)` whose entries may be negative. Positive and negative sites are
//! factored separately:
//!
//! ```text
//! L1 L1ᵀ = I + W1 K11 W1                     W1 = diag(τ̃ᵢ^½),   τ̃ᵢ > 0
//! L2 L2ᵀ = I − W2 (K22 − U2 U2ᵀ) W2          W2 = diag(|τ̃ᵢ|^½), τ̃ᵢ < 0
//! U2     = K21 W1 L1⁻ᵀ
//! Σ      = K − U Uᵀ + V Vᵀ
//! log|I + K T| = log|L1|² + log|L2|²
//! ```
//!
//! `L1` always exists for a positive semi-definite `K`. `L2` fails when the
//! negative precisions are too large for the posterior to stay proper, which
//! callers treat as a rejected site configuration.

use std::ops::Index;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ep::SiteSet;

/// Relative pivot tolerance of [`cholesky`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;
/// Relative diagonal jitter added to prior covariances before factorization.
pub const JITTER: f64 = 1e-8;
/// Site precisions with smaller magnitude are treated as absent.
pub const ZERO_PRECISION: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("posterior is ill-conditioned: negative site precisions are too large")]
    IllConditioned,
    #[error("triangular factor is singular at row {0}")]
    SingularFactor(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// A dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds the matrix from its lower triangle; `f(i, j)` is only called for `j <= i`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    /// Wraps a square matrix, symmetrizing it as `(A + Aᵀ) / 2`.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch {
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let n = m.nrows();
        Ok(Self::from_fn(n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    /// Adds `JITTER × mean(diag)` to the diagonal.
    pub fn with_jitter(&self) -> SymMatrix {
        let n = self.dim();
        if n == 0 {
            return self.clone();
        }
        let jitter = JITTER * self.0.diagonal().mean();
        let mut m = self.0.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        SymMatrix(m)
    }

    /// `A ← A − c s sᵀ`.
    pub fn rank_one_update(&mut self, c: f64, s: &DVector<f64>) {
        let n = self.dim();
        for i in 0..n {
            for j in 0..=i {
                let v = self.0[(i, j)] - c * s[i] * s[j];
                self.0[(i, j)] = v;
                self.0[(j, i)] = v;
            }
        }
    }

    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.0[(rows[a], cols[b])])
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(DMatrix<f64>);

impl LowerTriangular {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `log |L Lᵀ|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.0.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.0[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.0[(i, i)];
            }
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.0[(k, i)] * x[k];
            }
            x[i] = s / self.0[(i, i)];
        }
        x
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve_spd(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = solve_triangular(self, b).expect("cholesky factor has a positive diagonal");
        self.solve_transpose(&y)
    }
}

/// Cholesky factorization `A = L Lᵀ`.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] when a pivot drops below
/// `PIVOT_TOLERANCE × max diag(A)`.
pub fn cholesky(a: &SymMatrix) -> Result<LowerTriangular, LinalgError> {
    let n = a.dim();
    let m = &a.0;
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > tol) || !pivot.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(LowerTriangular(l))
}

/// Forward substitution `L x = b`.
pub fn solve_triangular(l: &LowerTriangular, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let n = l.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    let mut x = b.clone();
    for i in 0..n {
        let d = l.0[(i, i)];
        if d == 0.0 {
            return Err(LinalgError::SingularFactor(i));
        }
        let mut s = x[i];
        for k in 0..i {
            s -= l.0[(i, k)] * x[k];
        }
        x[i] = s / d;
    }
    Ok(x)
}

/// Factors kept from a [`split_refresh`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCholesky {
    /// Indices with `τ̃ᵢ > 0`.
    pub positive: Vec<usize>,
    /// Indices with `τ̃ᵢ < 0`.
    pub negative: Vec<usize>,
    pub l1: LowerTriangular,
    pub l2: LowerTriangular,
    pub w1: DVector<f64>,
    pub w2: DVector<f64>,
    /// `K21 W1 L1⁻ᵀ`, one row per negative site.
    pub u2: DMatrix<f64>,
}

/// Gaussian posterior `N(m, Σ)` of the latent values given a site set.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorApprox {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    pub factor: SplitCholesky,
    /// `log |I + K T|`.
    pub logdet: f64,
}

impl PosteriorApprox {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn all_positive(&self) -> bool {
        self.factor.negative.is_empty() && self.factor.positive.len() == self.len()
    }

    /// Marginal mean and variance of latent `i`.
    pub fn marginal(&self, i: usize) -> (f64, f64) {
        (self.mean[i], self.cov[(i, i)])
    }

    /// `(K + T⁻¹)⁻¹ = T − T Σ T`, well defined for zero and negative precisions.
    pub fn weight_matrix(&self, tau: &[f64]) -> DMatrix<f64> {
        let n = self.len();
        if self.all_positive() {
            // S^½ B⁻¹ S^½ avoids the cancellation in T − TΣT for large precisions.
            let m = self.factor.l1.solve_matrix(&DMatrix::from_diagonal(&self.factor.w1));
            return m.transpose() * m;
        }
        DMatrix::from_fn(n, n, |i, j| {
            let d = if i == j { tau[i] } else { 0.0 };
            d - tau[i] * self.cov[(i, j)] * tau[j]
        })
    }

    /// `(K + T⁻¹)⁻¹ μ̃ = ν̃ − T m`, so that `m = K α`.
    pub fn alpha(&self, sites: &SiteSet) -> DVector<f64> {
        if self.all_positive() {
            let w = &self.factor.w1;
            let b = DVector::from_fn(self.len(), |i, _| sites.nu_tilde[i] / w[i]);
            return self.factor.l1.solve_spd(&b).component_mul(w);
        }
        DVector::from_fn(self.len(), |i, _| sites.nu_tilde[i] - sites.tau_tilde[i] * self.mean[i])
    }
}

/// Recomputes the posterior for prior covariance `k` and the given sites.
pub fn split_refresh(k: &SymMatrix, sites: &SiteSet) -> Result<PosteriorApprox, LinalgError> {
    let n = k.dim();
    if sites.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            actual: sites.len(),
        });
    }
    let tau = &sites.tau_tilde;
    let positive: Vec<usize> = (0..n).filter(|&i| tau[i] >= ZERO_PRECISION).collect();
    let negative: Vec<usize> = (0..n).filter(|&i| tau[i] <= -ZERO_PRECISION).collect();
    let all: Vec<usize> = (0..n).collect();

    let w1 = DVector::from_iterator(positive.len(), positive.iter().map(|&i| tau[i].sqrt()));
    let w2 = DVector::from_iterator(negative.len(), negative.iter().map(|&i| (-tau[i]).sqrt()));

    let k11 = k.submatrix(&positive, &positive);
    let b1 = SymMatrix::from_fn(positive.len(), |a, b| {
        let id = if a == b { 1.0 } else { 0.0 };
        id + w1[a] * k11[(a, b)] * w1[b]
    });
    let l1 = cholesky(&b1)?;

    // Uᵀ = L1⁻¹ W1 K[P, :]
    let mut w1_kp = k.submatrix(&positive, &all);
    for (a, w) in w1.iter().enumerate() {
        w1_kp.row_mut(a).scale_mut(*w);
    }
    let ut = l1.solve_matrix(&w1_kp);
    let reduced = k.as_matrix() - ut.transpose() * &ut;

    let u2 = DMatrix::from_fn(negative.len(), positive.len(), |a, b| ut[(b, negative[a])]);
    let b2 = SymMatrix::from_fn(negative.len(), |a, b| {
        let id = if a == b { 1.0 } else { 0.0 };
        id - w2[a] * reduced[(negative[a], negative[b])] * w2[b]
    });
    let l2 = cholesky(&b2).map_err(|_| LinalgError::IllConditioned)?;

    // Vᵀ = L2⁻¹ W2 (K − U Uᵀ)[N, :]
    let w2_kn = DMatrix::from_fn(negative.len(), n, |a, j| w2[a] * reduced[(negative[a], j)]);
    let vt = l2.solve_matrix(&w2_kn);
    let cov = SymMatrix::from_matrix(reduced + vt.transpose() * &vt)?;
    if (0..n).any(|i| !(cov[(i, i)] > 0.0) || !cov[(i, i)].is_finite()) {
        return Err(LinalgError::IllConditioned);
    }
    let nu = DVector::from_column_slice(&sites.nu_tilde);
    let mean = cov.as_matrix() * nu;
    let logdet = l1.log_det() + l2.log_det();

    Ok(PosteriorApprox {
        mean,
        cov,
        factor: SplitCholesky {
            positive,
            negative,
            l1,
            l2,
            w1,
            w2,
            u2,
        },
        logdet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::from_matrix(&b * b.transpose() + DMatrix::identity(n, n)).unwrap()
    }

    fn dense_posterior(k: &SymMatrix, sites: &SiteSet) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = k.dim();
        let kinv = k.as_matrix().clone().try_inverse().unwrap();
        let t = DMatrix::from_diagonal(&DVector::from_column_slice(&sites.tau_tilde));
        let sigma = (kinv + &t).try_inverse().unwrap();
        let m = &sigma * DVector::from_column_slice(&sites.nu_tilde);
        let det = (DMatrix::identity(n, n) + k.as_matrix() * t).determinant();
        (sigma, m, det.ln())
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l.as_matrix(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = SymMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0])).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l.as_matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(20, &mut rng);
        let l = cholesky(&a).unwrap();
        let err = (l.as_matrix() * l.as_matrix().transpose() - a.as_matrix()).amax();
        assert!(err < 1e-12, "reconstruction error {err}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SymMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(matches!(cholesky(&a), Err(LinalgError::NotPositiveDefinite { index: 1, .. })));
    }

    #[test]
    fn triangular_solves() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(solve_triangular(&l, &b).unwrap(), b);

        let l = LowerTriangular(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
        let x = solve_triangular(&l, &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(x, DVector::from_vec(vec![1.0, 1.0]));

        let singular = LowerTriangular(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(
            solve_triangular(&singular, &DVector::from_vec(vec![1.0, 1.0])),
            Err(LinalgError::SingularFactor(1))
        );
    }

    #[test]
    fn triangular_solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = cholesky(&random_spd(10, &mut rng)).unwrap();
        let b = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let x = solve_triangular(&l, &b).unwrap();
        assert!((l.as_matrix() * x - b).amax() < 1e-12);
    }

    #[test]
    fn zero_sites_recover_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_spd(6, &mut rng);
        let post = split_refresh(&k, &SiteSet::zeros(6)).unwrap();
        assert_eq!(post.cov.as_matrix(), k.as_matrix());
        assert_eq!(post.mean, DVector::zeros(6));
        assert_eq!(post.logdet, 0.0);
    }

    #[test]
    fn positive_and_mixed_sites_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for negative in [false, true] {
            let k = random_spd(5, &mut rng);
            let mut sites = SiteSet::zeros(5);
            for i in 0..5 {
                sites.tau_tilde[i] = rng.random_range(0.2..2.0);
                sites.nu_tilde[i] = rng.random_range(-1.0..1.0);
            }
            if negative {
                sites.tau_tilde[2] = -0.05;
            }
            let post = split_refresh(&k, &sites).unwrap();
            let (sigma, m, logdet) = dense_posterior(&k, &sites);
            assert!((post.cov.as_matrix() - sigma).amax() < 1e-10);
            assert!((&post.mean - m).amax() < 1e-10);
            assert!((post.logdet - logdet).abs() < 1e-10);
        }
    }

    #[test]
    fn too_negative_sites_are_ill_conditioned() {
        let k = SymMatrix::identity(2);
        let mut sites = SiteSet::zeros(2);
        sites.tau_tilde[0] = -2.0;
        assert_eq!(split_refresh(&k, &sites), Err(LinalgError::IllConditioned));
    }

    #[test]
    fn weight_matrix_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_spd(4, &mut rng);
        let mut sites = SiteSet::zeros(4);
        sites.tau_tilde = vec![1.0, 0.5, 2.0, 0.7];
        sites.nu_tilde = vec![0.1, -0.4, 0.3, 0.2];
        let post = split_refresh(&k, &sites).unwrap();
        let s = DMatrix::from_diagonal(&DVector::from_iterator(4, sites.tau_tilde.iter().map(|t| 1.0 / t)));
        let a = (k.as_matrix() + s).try_inverse().unwrap();
        assert!((post.weight_matrix(&sites.tau_tilde) - &a).amax() < 1e-10);
        let mu = DVector::from_iterator(4, (0..4).map(|i| sites.nu_tilde[i] / sites.tau_tilde[i]));
        assert!((post.alpha(&sites) - a * mu).amax() < 1e-10);
    }
}
