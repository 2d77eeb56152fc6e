//! Scoring of identified models: impulse-response MSE, NRMSE fit, SNR.

use crate::error::{Error, Result};

/// Mean square error between the first `horizon` taps of two impulse
/// responses.
pub fn impulse_mse(theta: &[f64], g_true: &[f64], horizon: usize) -> Result<f64> {
    if horizon == 0 || horizon > theta.len().min(g_true.len()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} out of range for tap lengths {} and {}",
            theta.len(),
            g_true.len()
        )));
    }
    let sum: f64 = (0..horizon)
        .map(|k| {
            let d = theta[k] - g_true[k];
            d * d
        })
        .sum();
    Ok(sum / horizon as f64)
}

/// Normalized root-mean-square fit in percent:
/// `100·(1 − ‖y − ŷ‖₂ / ‖y − mean(y)‖₂)`.
///
/// Errors when the measured output is constant (zero denominator).
pub fn fit_percent(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::InvalidArgument("length mismatch".into()));
    }
    if y.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let denom: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedFit);
    }
    let num: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * (1.0 - num / denom))
}

/// Signal-to-noise ratio `20·log10(std(y_clean)/e_std)` in dB, using the
/// mean-removed sample standard deviation.
pub fn snr_db(y_clean: &[f64], e_std: f64) -> Result<f64> {
    if y_clean.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    if !(e_std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be > 0, got {e_std}"
        )));
    }
    let n = y_clean.len() as f64;
    let mean = y_clean.iter().sum::<f64>() / n;
    let var = y_clean.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(20.0 * (var.sqrt() / e_std).log10())
}

/// Open-loop FIR prediction `ŷ(t) = Σ_k θ_k·u(t−k)`.
pub fn fir_predict(theta: &[f64], u: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (i, b) in theta.iter().enumerate() {
            let lag = i + 1;
            if t >= lag {
                acc += b * u[t - lag];
            }
        }
        y[t] = acc;
    }
    y
}

/// One scored sample of an identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub t: usize,
    pub mse_impulse: f64,
    pub fit_percent: f64,
    /// Hyperparameter snapshot; present only for the regularized estimator.
    pub eta: Option<Vec<f64>>,
    /// A priori prediction error at this sample.
    pub epsilon_o: f64,
}

/// Per-sample metric trajectory of one estimator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check the structural invariants: strictly increasing timestamps,
    /// nonnegative MSE, homogeneous eta columns.
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::InvalidArgument(format!(
                    "timestamps not strictly increasing at t = {}",
                    w[1].t
                )));
            }
        }
        let eta_len = self.records.first().and_then(|r| r.eta.as_ref().map(Vec::len));
        for r in &self.records {
            if r.mse_impulse < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative MSE at t = {}",
                    r.t
                )));
            }
            if r.eta.as_ref().map(Vec::len) != eta_len {
                return Err(Error::InvalidArgument("inconsistent eta columns".into()));
            }
        }
        Ok(())
    }

    /// Arithmetic mean of several runs, sample by sample in run order.
    pub fn mean_of(runs: &[MetricsSeries]) -> Result<MetricsSeries> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidArgument("no runs to average".into()))?;
        let len = first.len();
        if runs.iter().any(|r| r.len() != len) {
            return Err(Error::InvalidArgument("runs have different lengths".into()));
        }
        let m = runs.len() as f64;
        let mut records = Vec::with_capacity(len);
        for i in 0..len {
            let t = first.records[i].t;
            if runs.iter().any(|r| r.records[i].t != t) {
                return Err(Error::InvalidArgument("runs have different time axes".into()));
            }
            let mse = runs.iter().map(|r| r.records[i].mse_impulse).sum::<f64>() / m;
            let fit = runs.iter().map(|r| r.records[i].fit_percent).sum::<f64>() / m;
            let eps = runs.iter().map(|r| r.records[i].epsilon_o).sum::<f64>() / m;
            let eta = match &first.records[i].eta {
                None => None,
                Some(e0) => {
                    let mut acc = vec![0.0; e0.len()];
                    for r in runs {
                        let e = r.records[i].eta.as_ref().ok_or_else(|| {
                            Error::InvalidArgument("inconsistent eta columns across runs".into())
                        })?;
                        for (a, v) in acc.iter_mut().zip(e) {
                            *a += v;
                        }
                    }
                    Some(acc.into_iter().map(|v| v / m).collect())
                }
            };
            records.push(MetricsRecord {
                t,
                mse_impulse: mse,
                fit_percent: fit,
                eta,
                epsilon_o: eps,
            });
        }
        Ok(MetricsSeries { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let g = [0.3, -0.2, 0.1, 0.05];
        assert_eq!(impulse_mse(&g, &g, 4).unwrap(), 0.0);

        let shifted: Vec<f64> = g.iter().map(|v| v + 0.5).collect();
        assert_relative_eq!(impulse_mse(&shifted, &g, 4).unwrap(), 0.25, max_relative = 1e-14);

        let zeros = [0.0; 4];
        let expected = g.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_relative_eq!(impulse_mse(&zeros, &g, 4).unwrap(), expected, max_relative = 1e-14);

        assert!(impulse_mse(&g, &g, 5).is_err());
        assert!(impulse_mse(&g, &g, 0).is_err());
    }

    #[test]
    fn fit_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(fit_percent(&y, &y).unwrap(), 100.0);

        let mean = [2.5; 4];
        assert_relative_eq!(fit_percent(&y, &mean).unwrap(), 0.0, epsilon = 1e-12);

        // Residual with the same norm as y − mean(y) also scores 0.
        let denom: f64 = y.iter().map(|v| (v - 2.5) * (v - 2.5)).sum::<f64>().sqrt();
        let y_hat: Vec<f64> = y.iter().enumerate().map(|(i, v)| {
            if i == 0 { v + denom } else { *v }
        }).collect();
        assert_relative_eq!(fit_percent(&y, &y_hat).unwrap(), 0.0, epsilon = 1e-12);

        assert!(matches!(fit_percent(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedFit)));
    }

    #[test]
    fn snr_examples() {
        // Two-point signal with sample std exactly s.
        let y = [0.0, 2.0]; // mean 1, var (1+1)/1 = 2, std = sqrt(2)
        let s = 2.0f64.sqrt();
        assert_relative_eq!(snr_db(&y, s).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(snr_db(&y, s / 10.0).unwrap(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn fir_prediction_matches_transfer_function_response() {
        let taps = vec![0.5, -0.25, 0.125];
        let u = vec![1.0, 0.0, 2.0, -1.0, 0.5, 3.0];
        let tf = crate::lti::TransferFunction::fir(taps.clone()).unwrap();
        assert_eq!(fir_predict(&taps, &u), tf.response(&u));
    }

    #[test]
    fn mean_of_runs_is_entrywise() {
        let mk = |scale: f64| MetricsSeries {
            records: (1..=3)
                .map(|t| MetricsRecord {
                    t,
                    mse_impulse: scale * t as f64,
                    fit_percent: 50.0 + scale,
                    eta: Some(vec![scale, -scale]),
                    epsilon_o: scale,
                })
                .collect(),
        };
        let mean = MetricsSeries::mean_of(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(mean.records[1].mse_impulse, 4.0);
        assert_eq!(mean.records[0].eta, Some(vec![2.0, -2.0]));
    }

    proptest! {
        #[test]
        fn mse_is_permutation_invariant(
            taps in proptest::collection::vec(-5.0..5.0f64, 2..12),
            seed in 0u64..1000,
        ) {
            let n = taps.len();
            let g: Vec<f64> = taps.iter().map(|v| v * 0.7 + 0.1).collect();
            // A deterministic permutation derived from the seed.
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left((seed as usize) % n);
            let taps_p: Vec<f64> = order.iter().map(|&i| taps[i]).collect();
            let g_p: Vec<f64> = order.iter().map(|&i| g[i]).collect();
            let a = impulse_mse(&taps, &g, n).unwrap();
            let b = impulse_mse(&taps_p, &g_p, n).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn fit_never_exceeds_100(
            y in proptest::collection::vec(-10.0..10.0f64, 2..30),
            y_hat in proptest::collection::vec(-10.0..10.0f64, 2..30),
        ) {
            if y.len() == y_hat.len() {
                match fit_percent(&y, &y_hat) {
                    Ok(f) => {
                        prop_assert!(f <= 100.0);
                        if f == 100.0 {
                            prop_assert_eq!(&y, &y_hat);
                        }
                    }
                    Err(Error::UndefinedFit) => {}
                    Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
                }
            }
        }
    }
}
