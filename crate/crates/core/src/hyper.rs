//! Online hyperparameter update: the marginal-likelihood gradient surrogate
//! `Ψ`, its projection onto the constraint subspace, and the projected
//! gradient step.
//!
//! In the primed basis the negative marginal log-likelihood has the
//! per-entry derivative `∂J_h/∂η_k = ½(1 − (θ'_k² + σ²F'_kk)/e^{η_k})`; `Ψ`
//! drops the ½, which is absorbed into the adaptation gain. The projection
//! keeps second differences of `η` exactly zero, and a fallback branch keeps
//! `η₁ > η₂` from eroding faster than `γ·ε` per step.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::prior::{exp_clamped, HyperVector};

/// Lower clamp on `α = η₁ − η₂`, keeping C1 strict under repeated fallback
/// steps.
pub const ALPHA_MIN: f64 = 1e-6;

/// Default fallback slope `ε`.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Gradient surrogate `Ψ_k = 1 − (θ'_k² + σ²F'_kk)/e^{η_k}`.
pub fn compute_psi(
    theta_prime: &DVector<f64>,
    f_prime_diag: &DVector<f64>,
    eta: &[f64],
    sigma2: f64,
) -> DVector<f64> {
    let n = eta.len();
    assert_eq!(theta_prime.len(), n);
    assert_eq!(f_prime_diag.len(), n);
    DVector::from_fn(n, |k, _| {
        1.0 - (theta_prime[k] * theta_prime[k] + sigma2 * f_prime_diag[k]) / exp_clamped(eta[k])
    })
}

/// Raw and projected gradient surrogate for one step.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub psi: DVector<f64>,
    pub psi_projected: DVector<f64>,
    /// True when the constant-slope fallback branch produced the result.
    pub fallback_used: bool,
}

/// Precomputed projection data for a fixed model order.
///
/// `C` is the (n−2)×n second-difference stencil and
/// `P = I − Cᵀ(CCᵀ)⁻¹C` the orthogonal projector onto its null space (the
/// affine-in-index vectors). For n < 3 the constraint is empty and `P = I`.
#[derive(Debug, Clone)]
pub struct ProjectionContext {
    n: usize,
    c: DMatrix<f64>,
    p: DMatrix<f64>,
    pub gamma: f64,
    pub epsilon: f64,
}

impl ProjectionContext {
    pub fn new(n: usize, gamma: f64, epsilon: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("model order must be >= 1".into()));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and > 0, got {epsilon}"
            )));
        }
        let rows = n.saturating_sub(2);
        let mut c = DMatrix::zeros(rows, n);
        for r in 0..rows {
            c[(r, r)] = 1.0;
            c[(r, r + 1)] = -2.0;
            c[(r, r + 2)] = 1.0;
        }
        let p = if rows == 0 {
            DMatrix::identity(n, n)
        } else {
            let cct = &c * c.transpose();
            let cct_inv = Cholesky::new(cct)
                .ok_or_else(|| Error::Singular("CCt factorization".into()))?
                .inverse();
            DMatrix::identity(n, n) - c.transpose() * cct_inv * &c
        };
        Ok(Self {
            n,
            c,
            p,
            gamma,
            epsilon,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn second_difference_matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Project `Ψ` onto the constraint subspace and apply the slope branch.
    ///
    /// The orthogonal projection onto the affine family is evaluated in
    /// closed form (mean and least-squares slope), which equals `P·Ψ` to
    /// rounding but keeps the output's second differences exactly affine;
    /// that is what preserves C2 across hundreds of steps.
    pub fn project(&self, psi: DVector<f64>) -> GradientReport {
        assert_eq!(psi.len(), self.n);
        let n = self.n;
        if n == 1 {
            return GradientReport {
                psi_projected: psi.clone(),
                psi,
                fallback_used: false,
            };
        }

        let (intercept, slope) = if n == 2 {
            // P = I: the vector is trivially affine.
            (psi[0], psi[1] - psi[0])
        } else {
            let mean = psi.sum() / n as f64;
            let center = (n as f64 - 1.0) / 2.0;
            let mut cov = 0.0;
            let mut var = 0.0;
            for k in 0..n {
                let r = k as f64 - center;
                cov += r * psi[k];
                var += r * r;
            }
            let slope = cov / var;
            (mean - slope * center, slope)
        };

        if slope > 0.0 {
            let projected = DVector::from_fn(n, |k, _| intercept + slope * k as f64);
            GradientReport {
                psi,
                psi_projected: projected,
                fallback_used: false,
            }
        } else {
            let projected = DVector::from_fn(n, |k, _| intercept - self.epsilon * k as f64);
            GradientReport {
                psi,
                psi_projected: projected,
                fallback_used: true,
            }
        }
    }

    /// `η⁺ = η − γΨ_p`, with `α` clamped to [`ALPHA_MIN`].
    pub fn eta_step(&self, eta: &HyperVector, psi_projected: &DVector<f64>) -> HyperVector {
        self.eta_step_with_gamma(eta, psi_projected, self.gamma)
    }

    pub(crate) fn eta_step_with_gamma(
        &self,
        eta: &HyperVector,
        psi_projected: &DVector<f64>,
        gamma: f64,
    ) -> HyperVector {
        assert_eq!(eta.n(), self.n);
        assert_eq!(psi_projected.len(), self.n);
        let eta1 = eta.eta1() - gamma * psi_projected[0];
        if self.n == 1 {
            return HyperVector::from_affine(eta1, 0.0, 1).expect("finite scalar step");
        }
        // The step acts on the affine parameters: psi_projected is affine, so
        // the common difference moves by γ·(Ψ_p[1] − Ψ_p[0]).
        let slope = psi_projected[1] - psi_projected[0];
        let mut alpha = eta.alpha() + gamma * slope;
        if alpha < ALPHA_MIN {
            log::debug!("clamping alpha = {alpha:.3e} to {ALPHA_MIN:.0e}");
            alpha = ALPHA_MIN;
        }
        HyperVector::from_affine(eta1, alpha, self.n).expect("clamped alpha is positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{neg_log_marginal, BatchProblem};
    use crate::prior::{build_pi, second_difference_max};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn psi_is_zero_at_the_stationary_point() {
        let eta = [-0.5f64, -1.0, -1.5, -2.0];
        let theta = DVector::zeros(4);
        let sigma2 = 0.3;
        let f_diag = DVector::from_fn(4, |k, _| eta[k].exp() / sigma2);
        let psi = compute_psi(&theta, &f_diag, &eta, sigma2);
        assert!(psi.amax() < 1e-14);

        let psi = compute_psi(
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![0.0]),
            &[0.0],
            1.0,
        );
        assert_eq!(psi[0], 0.0);
    }

    #[test]
    fn projector_matrix_invariants() {
        for n in [3usize, 4, 7, 50] {
            let ctx = ProjectionContext::new(n, 1.0, 1e-4).unwrap();
            let p = ctx.projector();
            let c = ctx.second_difference_matrix();
            assert!((p * p - p).amax() <= 1e-10);
            assert!((p.transpose() - p).amax() <= 1e-10);
            assert!((c * p).amax() <= 1e-10);
        }
    }

    #[test]
    fn closed_form_projection_matches_dense_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [3usize, 5, 11, 40] {
            let ctx = ProjectionContext::new(n, 1.0, 1e-4).unwrap();
            for _ in 0..5 {
                let psi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                let dense = ctx.projector() * &psi;
                let report = ctx.project(psi);
                // Fallback may rewrite the slope; compare only when it kept
                // the projection.
                if !report.fallback_used {
                    assert!((&report.psi_projected - &dense).amax() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn decreasing_affine_input_triggers_fallback() {
        // Psi = [5, 4, 3, 2]: already affine, slope −1 < 0.
        let ctx = ProjectionContext::new(4, 1.0, 1e-4).unwrap();
        let report = ctx.project(DVector::from_vec(vec![5.0, 4.0, 3.0, 2.0]));
        assert!(report.fallback_used);
        let e = ctx.epsilon;
        let expected = [5.0, 5.0 - e, 5.0 - 2.0 * e, 5.0 - 3.0 * e];
        for k in 0..4 {
            assert_relative_eq!(report.psi_projected[k], expected[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn increasing_affine_input_is_unchanged() {
        let ctx = ProjectionContext::new(4, 1.0, 1e-4).unwrap();
        let report = ctx.project(DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]));
        assert!(!report.fallback_used);
        for k in 0..4 {
            assert_relative_eq!(report.psi_projected[k], k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_lands_in_the_constraint_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ctx = ProjectionContext::new(9, 1.0, 1e-4).unwrap();
        for _ in 0..20 {
            let psi = DVector::from_fn(9, |_, _| StandardNormal.sample(&mut rng));
            let report = ctx.project(psi);
            let residual = ctx.second_difference_matrix() * &report.psi_projected;
            assert!(residual.amax() <= 1e-10);
        }
    }

    #[test]
    fn eta_step_examples() {
        let ctx = ProjectionContext::new(3, 1.0, 1e-4).unwrap();
        let eta = HyperVector::from_vector(&[0.0, -1.0, -2.0]).unwrap();

        let unchanged = ctx.eta_step_with_gamma(&eta, &DVector::from_vec(vec![1.0, 1.0, 1.0]), 0.0);
        assert_eq!(unchanged.as_slice(), eta.as_slice());

        let unchanged = ctx.eta_step(&eta, &DVector::zeros(3));
        assert_eq!(unchanged.as_slice(), eta.as_slice());

        let shifted = ctx.eta_step(&eta, &DVector::from_vec(vec![1.0, 1.0, 1.0]));
        assert_eq!(shifted.as_slice(), &[-1.0, -2.0, -3.0]);
        assert_relative_eq!(shifted.alpha(), 1.0);
    }

    #[test]
    fn repeated_fallback_steps_respect_the_alpha_clamp() {
        let ctx = ProjectionContext::new(5, 0.5, 1e-2).unwrap();
        let mut eta = HyperVector::from_affine(0.0, 3.0 * ctx.gamma * ctx.epsilon, 5).unwrap();
        for _ in 0..50 {
            // A fallback-shaped step: slope exactly −ε.
            let psi_p = DVector::from_fn(5, |k, _| 1.0 - ctx.epsilon * k as f64);
            eta = ctx.eta_step(&eta, &psi_p);
            assert!(eta.alpha() >= ALPHA_MIN);
            assert!(eta.as_slice()[0] > eta.as_slice()[1]);
        }
        assert_relative_eq!(eta.alpha(), ALPHA_MIN);
    }

    #[test]
    fn half_psi_matches_finite_differences_of_marginal_cost() {
        // 20 random small instances; ½Ψ must equal ∇J_h through the batch
        // re-solve, to 1e-5 relative.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut count = 0;
        for &n in &[4usize, 6, 8] {
            for &t in &[8usize, 15] {
                for _ in 0..4 {
                    count += 1;
                    let phi = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(&mut rng));
                    let y = DVector::from_fn(t, |_, _| StandardNormal.sample(&mut rng));
                    let eta: Vec<f64> =
                        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let sigma2 = 0.6;

                    let psi = psi_from_batch(&phi, &y, &eta, sigma2);

                    let h = 1e-5;
                    let mut fd = DVector::zeros(n);
                    for k in 0..n {
                        let mut plus = eta.clone();
                        plus[k] += h;
                        let mut minus = eta.clone();
                        minus[k] -= h;
                        fd[k] = (j_h(&phi, &y, &plus, sigma2) - j_h(&phi, &y, &minus, sigma2))
                            / (2.0 * h);
                    }
                    let rel = (0.5 * &psi - &fd).norm() / fd.norm();
                    assert!(rel <= 1e-5, "n={n} t={t}: relative error {rel:.3e}");
                }
            }
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn small_projected_steps_do_not_increase_the_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..10 {
            let n = 6;
            let t = 14;
            let phi = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(&mut rng));
            let y = DVector::from_fn(t, |_, _| StandardNormal.sample(&mut rng));
            let eta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let sigma2 = 0.6;

            let psi = psi_from_batch(&phi, &y, &eta, sigma2);
            let ctx = ProjectionContext::new(n, 1e-4, 1e-4).unwrap();
            let report = ctx.project(psi);
            if report.fallback_used || report.psi_projected.amax() < 1e-9 {
                continue;
            }
            let stepped: Vec<f64> = (0..n)
                .map(|k| eta[k] - ctx.gamma * report.psi_projected[k])
                .collect();
            let before = j_h(&phi, &y, &eta, sigma2);
            let after = j_h(&phi, &y, &stepped, sigma2);
            assert!(after <= before + 1e-12, "J_h rose from {before} to {after}");
        }
    }

    /// Batch-side Ψ: solve in the primed basis and apply the closed form.
    fn psi_from_batch(phi: &DMatrix<f64>, y: &DVector<f64>, eta: &[f64], sigma2: f64) -> DVector<f64> {
        let n = eta.len();
        let u = crate::prior::build_u(n);
        let sol = crate::batch::batch_solve(
            &BatchProblem::new(phi.clone(), y.clone(), sigma2, build_pi(eta)).unwrap(),
        )
        .unwrap();
        let u_inv = u.clone().try_inverse().unwrap();
        let theta_prime = &u_inv * &sol.theta;
        let f_prime = &u_inv * &sol.f * u_inv.transpose();
        compute_psi(&theta_prime, &f_prime.diagonal(), eta, sigma2)
    }

    fn j_h(phi: &DMatrix<f64>, y: &DVector<f64>, eta: &[f64], sigma2: f64) -> f64 {
        neg_log_marginal(
            &BatchProblem::new(phi.clone(), y.clone(), sigma2, build_pi(eta)).unwrap(),
        )
        .unwrap()
        .value
    }

    proptest! {
        #[test]
        fn eta_step_preserves_constraints(
            eta1 in -8.0..3.0f64,
            alpha in 1e-5..0.8f64,
            psi in proptest::collection::vec(-50.0..50.0f64, 5),
            gamma in 0.0..2.0f64,
        ) {
            let ctx = ProjectionContext::new(5, gamma, 1e-4).unwrap();
            let eta = HyperVector::from_affine(eta1, alpha, 5).unwrap();
            let report = ctx.project(DVector::from_vec(psi));
            let next = ctx.eta_step(&eta, &report.psi_projected);
            prop_assert!(second_difference_max(next.as_slice()) < 1e-12);
            prop_assert!(next.as_slice()[0] > next.as_slice()[1]);
            prop_assert!(next.alpha() >= ALPHA_MIN);
        }
    }
}
