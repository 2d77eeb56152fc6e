//! Discrete-time LTI simulation for dataset generation.
//!
//! Transfer functions are rational in the delay operator `q⁻¹` and strictly
//! proper: the numerator starts at `q⁻¹`, so the response to an impulse at
//! t = 0 begins at t = 1. This matches the FIR model convention where the
//! parameter vector holds the taps g₁..gₙ.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Rational discrete-time model `G(q) = num(q⁻¹, starting at q⁻¹) / den(q⁻¹)`.
///
/// `num[i]` multiplies `q⁻⁽ⁱ⁺¹⁾`; `den[j]` multiplies `q⁻ʲ` with `den[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if num.is_empty() {
            return Err(Error::InvalidArgument("numerator is empty".into()));
        }
        if den.is_empty() {
            return Err(Error::InvalidArgument("denominator is empty".into()));
        }
        if den[0] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "leading denominator coefficient must be exactly 1, got {}",
                den[0]
            )));
        }
        if num.iter().chain(den.iter()).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("transfer function coefficient".into()));
        }
        Ok(Self { num, den })
    }

    /// Pure FIR model with taps `g₁..gₙ`.
    pub fn fir(taps: Vec<f64>) -> Result<Self> {
        Self::new(taps, vec![1.0])
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    /// Series connection `self · other`, expanded to a single rational function.
    ///
    /// Both numerators start at `q⁻¹`, so the product numerator starts at
    /// `q⁻²` and a zero `q⁻¹` coefficient is prepended.
    pub fn cascade(&self, other: &TransferFunction) -> TransferFunction {
        let mut num = vec![0.0];
        num.extend(convolve(&self.num, &other.num));
        let den = convolve(&self.den, &other.den);
        TransferFunction { num, den }
    }

    /// Output sequence for the input `u`, zero initial conditions.
    pub fn response(&self, u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; u.len()];
        for t in 0..u.len() {
            let mut acc = 0.0;
            for (i, b) in self.num.iter().enumerate() {
                let lag = i + 1;
                if t >= lag {
                    acc += b * u[t - lag];
                }
            }
            for (j, a) in self.den.iter().enumerate().skip(1) {
                if t >= j {
                    acc -= a * y[t - j];
                }
            }
            y[t] = acc;
        }
        y
    }

    /// First `horizon` impulse-response taps `g₁..g_horizon`.
    ///
    /// Runs the difference equation on a unit impulse applied at t = 0; the
    /// t = 0 output (direct feedthrough) is identically zero here because the
    /// numerator has no `q⁰` term, and is excluded from the returned taps.
    pub fn impulse_response(&self, horizon: usize) -> Result<Vec<f64>> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let mut impulse = vec![0.0; horizon + 1];
        impulse[0] = 1.0;
        let y = self.response(&impulse);
        Ok(y[1..].to_vec())
    }

    /// True when every denominator root lies strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        let p = self.den.len() - 1;
        if p == 0 {
            return true;
        }
        // Companion matrix of zᵖ + a₁zᵖ⁻¹ + … + aₚ.
        let mut companion = DMatrix::zeros(p, p);
        for j in 0..p {
            companion[(0, j)] = -self.den[j + 1];
        }
        for i in 1..p {
            companion[(i, i - 1)] = 1.0;
        }
        companion
            .complex_eigenvalues()
            .iter()
            .all(|z| z.norm() < 1.0)
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// The two-section benchmark system used by the experiment harness,
/// expanded to a single rational function.
pub fn nominal_model() -> TransferFunction {
    let first = TransferFunction::new(
        vec![0.02008, 0.04017, 0.02008],
        vec![1.0, -1.561, 0.6414],
    )
    .expect("static coefficients");
    let second = TransferFunction::new(
        vec![-0.7334, 1.516, -0.7591, 0.6941],
        vec![1.0, -1.282, 1.298, -0.4757, 0.1775],
    )
    .expect("static coefficients");
    first.cascade(&second)
}

/// One simulated input/output record.
///
/// Regenerating with the same transfer function, input, noise level and seed
/// reproduces `y` bit-exactly: the noise stream is ChaCha8 keyed by `seed`
/// and sampled through the ziggurat standard-normal sampler pinned by the
/// lockfile.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    /// Noise standard deviation used during generation.
    pub e_std: f64,
    /// Seed of the noise stream.
    pub seed: u64,
}

/// Simulate `y = G(q)u + e` with i.i.d. zero-mean Gaussian noise.
pub fn simulate(
    tf: &TransferFunction,
    u: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<DataRecord> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("input sequence is empty".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_std must be finite and >= 0, got {noise_std}"
        )));
    }
    let mut y = tf.response(u);
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut y {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += noise_std * e;
        }
    }
    Ok(DataRecord {
        u: u.to_vec(),
        y,
        e_std: noise_std,
        seed,
    })
}

/// Zero-mean Gaussian signal with the given standard deviation; deterministic
/// per seed (same generator as [`simulate`]).
pub fn gaussian_signal(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            std * e
        })
        .collect()
}

/// Regressor `φ(t) = [u(t−1), …, u(t−n)]ᵀ` with zero padding outside the
/// recorded window.
pub fn make_regressor(u: &[f64], t: usize, n: usize) -> DVector<f64> {
    assert!(n >= 1, "model order must be >= 1");
    DVector::from_fn(n, |i, _| {
        let lag = i + 1;
        if t >= lag && t - lag < u.len() {
            u[t - lag]
        } else {
            0.0
        }
    })
}
