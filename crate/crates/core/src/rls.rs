//! Classical recursive least squares, used as the comparison baseline.
//!
//! The gain matrix propagates through the matrix inversion lemma, so
//! `F⁻¹(t+1) = F⁻¹(t) + φφᵀ` holds without ever forming an inverse; each step
//! costs O(n²). No forgetting factor is applied.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Estimator state: parameter vector, gain matrix, sample counter.
#[derive(Debug, Clone)]
pub struct RlsState {
    theta: DVector<f64>,
    f: DMatrix<f64>,
    t: usize,
}

impl RlsState {
    /// Zero parameters and `F(0) = f0_diag·I`.
    pub fn new(n: usize, f0_diag: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("model order must be >= 1".into()));
        }
        if !(f0_diag > 0.0) || !f0_diag.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "initial gain must be finite and > 0, got {f0_diag}"
            )));
        }
        Ok(Self {
            theta: DVector::zeros(n),
            f: DMatrix::identity(n, n) * f0_diag,
            t: 0,
        })
    }

    /// Arbitrary start state; `f` must be symmetric positive definite.
    pub fn from_parts(theta: DVector<f64>, f: DMatrix<f64>) -> Result<Self> {
        let n = theta.len();
        if f.nrows() != n || f.ncols() != n {
            return Err(Error::InvalidArgument("gain matrix dimension mismatch".into()));
        }
        let asym = (&f - f.transpose()).amax();
        if asym > 1e-10 * f.amax().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "gain matrix not symmetric: asymmetry {asym:.3e}"
            )));
        }
        if nalgebra::Cholesky::new(f.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("initial gain matrix".into()));
        }
        Ok(Self { theta, f, t: 0 })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// One measurement update; returns the a priori prediction error
    /// `ε° = y − φᵀθ̂`. On a non-finite input the state is left unchanged.
    pub fn step(&mut self, phi: &DVector<f64>, y_next: f64) -> Result<f64> {
        check_finite(phi, y_next, self.order())?;
        let (eps, _) = rank_one_update(&mut self.theta, &mut self.f, phi, y_next);
        self.t += 1;
        Ok(eps)
    }
}

pub(crate) fn check_finite(phi: &DVector<f64>, y_next: f64, n: usize) -> Result<()> {
    if phi.len() != n {
        return Err(Error::InvalidArgument(format!(
            "regressor length {} does not match model order {}",
            phi.len(),
            n
        )));
    }
    if !y_next.is_finite() {
        return Err(Error::NonFinite(format!("measurement y = {y_next}")));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regressor entry".into()));
    }
    Ok(())
}

/// Shared RLS-form rank-one update:
///
/// ```text
/// ε° = y − φᵀθ,   s = 1 + φᵀFφ,
/// θ ← θ + Fφ·ε°/s,   F ← F − Fφ(Fφ)ᵀ/s.
/// ```
///
/// Returns `(ε°, s)`. `F` is re-symmetrized afterwards to arrest round-off
/// drift. Cost O(n²).
pub(crate) fn rank_one_update(
    theta: &mut DVector<f64>,
    f: &mut DMatrix<f64>,
    phi: &DVector<f64>,
    y_next: f64,
) -> (f64, f64) {
    let eps = y_next - theta.dot(phi);
    let k = &*f * phi;
    let s = 1.0 + phi.dot(&k);
    theta.axpy(eps / s, &k, 1.0);
    f.ger(-1.0 / s, &k, &k, 1.0);
    symmetrize(f);
    (eps, s)
}

pub(crate) fn symmetrize(f: &mut DMatrix<f64>) {
    let n = f.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (f[(i, j)] + f[(j, i)]);
            f[(i, j)] = v;
            f[(j, i)] = v;
        }
    }
}
