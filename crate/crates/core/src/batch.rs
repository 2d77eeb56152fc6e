//! Batch-mode reference computations.
//!
//! Everything here re-solves the estimation problem from the full data
//! matrix, with no recursion. The recursive estimators are validated against
//! these routines, and the marginal-likelihood gradient computed here backs
//! the finite-difference checks of the online gradient surrogate.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{make_regressor, DataRecord};
use crate::prior::{exp_clamped, w_inv_diag};

/// Regularized least-squares problem: `t` stacked regressors, measurements,
/// known noise variance and the regularization matrix.
#[derive(Debug, Clone)]
pub struct BatchProblem {
    pub phi: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma2: f64,
    pub pi: DMatrix<f64>,
}

impl BatchProblem {
    pub fn new(phi: DMatrix<f64>, y: DVector<f64>, sigma2: f64, pi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} regressor rows vs {} measurements",
                phi.nrows(),
                y.len()
            )));
        }
        let n = phi.ncols();
        if pi.nrows() != n || pi.ncols() != n {
            return Err(Error::InvalidArgument(
                "regularization matrix dimension mismatch".into(),
            ));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be finite and > 0, got {sigma2}"
            )));
        }
        if Cholesky::new(pi.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("regularization matrix".into()));
        }
        Ok(Self { phi, y, sigma2, pi })
    }

    /// Assemble the problem from a dataset: measurements `y(1)..y(t)`, each
    /// paired with its regressor `[u(i−1), …, u(i−n)]`.
    pub fn from_dataset(
        rec: &DataRecord,
        n: usize,
        t: usize,
        sigma2: f64,
        pi: DMatrix<f64>,
    ) -> Result<Self> {
        if t + 1 > rec.y.len() {
            return Err(Error::InvalidArgument(format!(
                "t = {t} needs {} samples, record has {}",
                t + 1,
                rec.y.len()
            )));
        }
        let mut phi = DMatrix::zeros(t, n);
        for i in 0..t {
            phi.set_row(i, &make_regressor(&rec.u, i + 1, n).transpose());
        }
        let y = DVector::from_fn(t, |i, _| rec.y[i + 1]);
        Self::new(phi, y, sigma2, pi)
    }

    pub fn order(&self) -> usize {
        self.phi.ncols()
    }

    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BatchSolution {
    /// Regularized estimate `(ΦᵀΦ + σ²Π⁻¹)⁻¹ Φᵀy`.
    pub theta: DVector<f64>,
    /// Gain matrix `(ΦᵀΦ + σ²Π⁻¹)⁻¹`.
    pub f: DMatrix<f64>,
}

/// Solve the regularized normal equations through an SPD factorization.
pub fn batch_solve(p: &BatchProblem) -> Result<BatchSolution> {
    let pi_inv = Cholesky::new(p.pi.clone())
        .ok_or_else(|| Error::Singular("regularization matrix".into()))?
        .inverse();
    let a = p.phi.transpose() * &p.phi + p.sigma2 * pi_inv;
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular("normal equations".into()))?;
    let theta = chol.solve(&(p.phi.transpose() * &p.y));
    let f = chol.inverse();
    Ok(BatchSolution { theta, f })
}

/// Negative marginal log-likelihood `J_h = ½log(2π|Σ|) + ½YᵀΣ⁻¹Y` with
/// `Σ = ΦΠΦᵀ + σ²I`, evaluated along two routes.
#[derive(Debug, Clone, Copy)]
pub struct MarginalCost {
    /// Production route: works in the n×n parameter space, never inverting Σ.
    pub value: f64,
    /// Direct route through a t×t factorization of Σ; kept for cross-checks.
    pub direct: f64,
}

pub fn neg_log_marginal(p: &BatchProblem) -> Result<MarginalCost> {
    let t = p.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    // Route (b): |Σ| = |σ²Π⁻¹ + ΦᵀΦ|·|Π|·σ^{2(t−n)} and
    // YᵀΣ⁻¹Y = (YᵀY − bᵀA⁻¹b)/σ² with A = σ²Π⁻¹ + ΦᵀΦ, b = ΦᵀY.
    let pi_chol =
        Cholesky::new(p.pi.clone()).ok_or_else(|| Error::Singular("regularization matrix".into()))?;
    let logdet_pi = 2.0 * pi_chol.l().diagonal().map(f64::ln).sum();
    let a = p.phi.transpose() * &p.phi + p.sigma2 * pi_chol.inverse();
    let a_chol = Cholesky::new(a).ok_or_else(|| Error::Singular("normal equations".into()))?;
    let logdet_a = 2.0 * a_chol.l().diagonal().map(f64::ln).sum();
    let n = p.order();
    let logdet_sigma = logdet_a + logdet_pi + (t as f64 - n as f64) * p.sigma2.ln();
    let b = p.phi.transpose() * &p.y;
    let quad = (p.y.dot(&p.y) - b.dot(&a_chol.solve(&b))) / p.sigma2;
    let value = 0.5 * (ln_2pi + logdet_sigma) + 0.5 * quad;

    // Route (a): direct t×t factorization.
    let sigma = &p.phi * &p.pi * p.phi.transpose() + DMatrix::identity(t, t) * p.sigma2;
    let s_chol =
        Cholesky::new(sigma).ok_or_else(|| Error::Singular("output covariance".into()))?;
    let logdet_direct = 2.0 * s_chol.l().diagonal().map(f64::ln).sum();
    let quad_direct = p.y.dot(&s_chol.solve(&p.y));
    let direct = 0.5 * (ln_2pi + logdet_direct) + 0.5 * quad_direct;

    Ok(MarginalCost { value, direct })
}

/// Gradient of the marginal log-likelihood with respect to each
/// hyperparameter, given the per-entry derivatives of `Π⁻¹`:
///
/// `g_k = ½·Tr([(Π − θ̂θ̂ᵀ) − σ²F]·∂Π⁻¹/∂η_k)`.
pub fn exact_gradient(p: &BatchProblem, d_pi_inv: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let n = p.order();
    for d in d_pi_inv {
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::InvalidArgument(
                "derivative matrix dimension mismatch".into(),
            ));
        }
    }
    let sol = batch_solve(p)?;
    let m = &p.pi - &sol.theta * sol.theta.transpose() - p.sigma2 * &sol.f;
    Ok(DVector::from_iterator(
        d_pi_inv.len(),
        d_pi_inv.iter().map(|d| {
            // Tr(M·D) = Σ_ij M_ij·D_ji
            let mut tr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    tr += m[(i, j)] * d[(j, i)];
                }
            }
            0.5 * tr
        }),
    ))
}

/// Per-entry derivatives of `Π⁻¹` for the structured prior:
/// `∂Π⁻¹/∂η_k = −e^{−η_k}·v_k v_kᵀ` with `v_k = U⁻ᵀe_k` a sparse
/// difference vector.
pub fn pi_inv_derivatives(eta: &[f64]) -> Vec<DMatrix<f64>> {
    let n = eta.len();
    (0..n)
        .map(|k| {
            let mut v = DVector::zeros(n);
            v[k] = 1.0;
            if k + 1 < n {
                v[k + 1] = -1.0;
            }
            let scale = -exp_clamped(-eta[k]);
            scale * &v * v.transpose()
        })
        .collect()
}

/// `W(η)⁻¹` as a dense matrix; convenience for primed-basis batch solves.
pub fn w_inv_matrix(eta: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&w_inv_diag(eta))
}
