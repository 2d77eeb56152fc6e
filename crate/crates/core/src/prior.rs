//! Structured regularization matrix `Π(η) = U·W(η)·Uᵀ`.
//!
//! `U` is the upper-triangular all-ones matrix and `W(η) = diag(exp η)`.
//! The hyperparameter vector is constrained to the affine-in-index family
//! `η_k = η₁ − (k−1)α` with `α > 0` (constraints C1 and C2), which makes the
//! prior a geometrically decaying diagonal kernel after the change of basis
//! `θ' = U⁻¹θ`, `φ' = Uᵀφ`.
//!
//! Products with `U`, `Uᵀ` and `U⁻¹` are running sums and first differences
//! and are implemented as O(n) transforms; the dense matrix is only built
//! where a test or a batch computation wants it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Absolute tolerance on second differences when validating C2.
pub const C2_TOL: f64 = 1e-12;

/// Exponent clamp bound protecting `exp(η)` from overflow.
const ETA_CLAMP: f64 = 700.0;

/// `exp(η)` with `η` clamped to ±700.
pub(crate) fn exp_clamped(eta: f64) -> f64 {
    if eta.abs() > ETA_CLAMP {
        log::debug!("clamping exponent {eta} to ±{ETA_CLAMP}");
        eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()
    } else {
        eta.exp()
    }
}

/// Hyperparameter vector constrained to `η_k = η₁ − (k−1)α`, `α > 0`.
///
/// The vector is stored in canonical affine form, so second differences of
/// the materialized entries stay at rounding level no matter how many update
/// steps have been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector {
    eta: DVector<f64>,
    alpha: f64,
}

impl HyperVector {
    /// Build from the affine parameters. `alpha` must be positive when the
    /// vector has at least two entries (constraint C1).
    pub fn from_affine(eta1: f64, alpha: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("hyperparameter length 0".into()));
        }
        if !eta1.is_finite() || !alpha.is_finite() {
            return Err(Error::NonFinite("hyperparameter parameters".into()));
        }
        if n >= 2 && alpha <= 0.0 {
            return Err(Error::Constraint(format!(
                "C1 requires eta2 < eta1, i.e. alpha > 0; got alpha = {alpha}"
            )));
        }
        let alpha = if n == 1 { 0.0 } else { alpha };
        let eta = DVector::from_fn(n, |k, _| eta1 - k as f64 * alpha);
        Ok(Self { eta, alpha })
    }

    /// Validate a raw vector against C1/C2 and canonicalize it.
    pub fn from_vector(eta: &[f64]) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::InvalidArgument("hyperparameter length 0".into()));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hyperparameter entry".into()));
        }
        let d2 = second_difference_max(eta);
        if d2 > C2_TOL {
            return Err(Error::Constraint(format!(
                "C2 violated: max |second difference| = {d2:.3e} > {C2_TOL:.0e}"
            )));
        }
        if eta.len() >= 2 && eta[1] >= eta[0] {
            return Err(Error::Constraint(format!(
                "C1 violated: eta2 = {} >= eta1 = {}",
                eta[1], eta[0]
            )));
        }
        let alpha = if eta.len() >= 2 { eta[0] - eta[1] } else { 0.0 };
        Self::from_affine(eta[0], alpha, eta.len())
    }

    pub fn n(&self) -> usize {
        self.eta.len()
    }

    pub fn eta1(&self) -> f64 {
        self.eta[0]
    }

    /// Common difference `α = η₁ − η₂` (0 for a length-1 vector).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn as_slice(&self) -> &[f64] {
        self.eta.as_slice()
    }
}

/// Largest absolute second difference `|η_k − 2η_{k+1} + η_{k+2}|`.
pub fn second_difference_max(eta: &[f64]) -> f64 {
    eta.windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]).abs())
        .fold(0.0, f64::max)
}

/// Dense n×n upper-triangular all-ones matrix.
pub fn build_u(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if j >= i { 1.0 } else { 0.0 })
}

/// `Π(η) = U·diag(exp η)·Uᵀ`, valid for any real `η`.
///
/// Entrywise `Π[i][j] = Σ_{k ≥ max(i,j)} exp(η_k)`, evaluated through suffix
/// sums of `exp(η)`.
pub fn build_pi(eta: &[f64]) -> DMatrix<f64> {
    let n = eta.len();
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + exp_clamped(eta[k]);
    }
    DMatrix::from_fn(n, n, |i, j| suffix[i.max(j)])
}

/// Diagonal of `W(η) = diag(exp η)`.
pub fn w_diag(eta: &[f64]) -> DVector<f64> {
    DVector::from_iterator(eta.len(), eta.iter().map(|&v| exp_clamped(v)))
}

/// Diagonal of `W(η)⁻¹`.
pub fn w_inv_diag(eta: &[f64]) -> DVector<f64> {
    DVector::from_iterator(eta.len(), eta.iter().map(|&v| exp_clamped(-v)))
}

/// `Uᵀ·φ`: running (cumulative) sums of `φ`. O(n).
pub fn u_transpose_mul(phi: &DVector<f64>) -> DVector<f64> {
    let mut out = phi.clone();
    for i in 1..out.len() {
        out[i] += out[i - 1];
    }
    out
}

/// `U·v`: suffix sums of `v`. O(n).
pub fn u_mul(v: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    for i in (0..out.len().saturating_sub(1)).rev() {
        out[i] += out[i + 1];
    }
    out
}

/// `U⁻¹·θ`: first differences `θ_i − θ_{i+1}`, last entry unchanged. O(n).
pub fn u_inv_mul(theta: &DVector<f64>) -> DVector<f64> {
    let n = theta.len();
    DVector::from_fn(n, |i, _| {
        if i + 1 < n {
            theta[i] - theta[i + 1]
        } else {
            theta[i]
        }
    })
}

/// Prior specification: model order plus constrained hyperparameters.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    eta: HyperVector,
}

impl PriorSpec {
    pub fn new(eta: HyperVector) -> Self {
        Self { eta }
    }

    pub fn n(&self) -> usize {
        self.eta.n()
    }

    pub fn eta(&self) -> &HyperVector {
        &self.eta
    }

    pub fn u(&self) -> DMatrix<f64> {
        build_u(self.n())
    }

    pub fn pi(&self) -> DMatrix<f64> {
        build_pi(self.eta.as_slice())
    }

    pub fn w(&self) -> DVector<f64> {
        w_diag(self.eta.as_slice())
    }

    /// The diagonal-kernel view `(β, λ)`; requires n ≥ 2.
    pub fn di_view(&self) -> Result<DiKernelView> {
        DiKernelView::from_eta(self.eta.as_slice())
    }
}

/// Diagonal-kernel parameters: `W_kk = β·λ^(k−1)` with `β = exp(η₁)` and
/// `λ = exp(−α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiKernelView {
    pub beta: f64,
    pub lambda: f64,
}

impl DiKernelView {
    /// Extract `(β, λ)` from a raw hyperparameter vector, validating C1/C2.
    pub fn from_eta(eta: &[f64]) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::InvalidArgument(
                "diagonal-kernel view needs at least two hyperparameters".into(),
            ));
        }
        let d2 = second_difference_max(eta);
        if d2 > C2_TOL {
            return Err(Error::Constraint(format!(
                "C2 violated: max |second difference| = {d2:.3e}"
            )));
        }
        let alpha = eta[0] - eta[1];
        if alpha <= 0.0 {
            return Err(Error::Constraint(format!(
                "C1 violated: alpha = {alpha} <= 0"
            )));
        }
        Ok(Self {
            beta: exp_clamped(eta[0]),
            lambda: (-alpha).exp(),
        })
    }

    /// Rebuild the diagonal of `W` from the view.
    pub fn w_diag(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |k, _| self.beta * self.lambda.powi(k as i32))
    }
}

/// Partial sum `Σ_{k=1}^{m} Π_kk^{1/2}`.
pub fn stability_partial_sums(spec: &PriorSpec, m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    let n = spec.n();
    if m > n {
        return Err(Error::InvalidArgument(format!("m = {m} exceeds n = {n}")));
    }
    let eta = spec.eta.as_slice();
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + exp_clamped(eta[k]);
    }
    Ok((0..m).map(|k| suffix[k].sqrt()).sum())
}

/// Closed-form upper bound on `Σ_k Π_kk^{1/2}` for every n:
/// `√W₁₁ / √(1−λ) · 1/(1−λ^{1/2})`.
pub fn stability_bound(spec: &PriorSpec) -> Result<f64> {
    let view = spec.di_view()?;
    let w11 = view.beta;
    let lambda = view.lambda;
    Ok(w11.sqrt() / (1.0 - lambda).sqrt() / (1.0 - lambda.sqrt()))
}
