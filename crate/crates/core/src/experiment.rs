//! End-to-end benchmark harness: dataset generation, all estimators run
//! sample by sample, metrics averaged over Monte-Carlo runs, CSV output.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hyper::ProjectionContext;
use crate::lti::{gaussian_signal, make_regressor, nominal_model, simulate, DataRecord};
use crate::metrics::{fir_predict, fit_percent, impulse_mse, snr_db, MetricsRecord, MetricsSeries};
use crate::prior::HyperVector;
use crate::regularized::RegEstimator;
use crate::rls::RlsState;

pub mod verify;

/// Seed-stream separators so that input and noise sequences drawn from the
/// same run seed are independent.
const INPUT_STREAM: u64 = 0x5eed_0001;
const NOISE_STREAM: u64 = 0x5eed_0002;

/// Nominal noise variance handed to the regularized estimator when the data
/// is generated noiselessly. Keeps the initial gain `W(η₀)/σ²` within a range
/// where the rank-one updates stay well conditioned.
const SIGMA2_FLOOR: f64 = 1e-6;

/// Full configuration of the comparison study.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ExperimentConfig {
    /// FIR model order n.
    pub order: usize,
    /// Number of simulated samples per run.
    pub samples: usize,
    /// Standard deviation of the Gaussian input.
    pub input_std: f64,
    /// Standard deviation of the measurement noise.
    pub noise_std: f64,
    /// Initial diagonal gains of the RLS baselines.
    pub rls_f0: Vec<f64>,
    /// Hyperparameter adaptation gain γ.
    pub gamma: f64,
    /// Initial log-variance η₁(0).
    pub eta1_init: f64,
    /// Initial log-ratio: η_k(0) = ratio_init + η_{k−1}(0).
    pub ratio_init: f64,
    /// Number of Monte-Carlo runs.
    pub runs: usize,
    /// Base seed; run k uses base_seed + k unless `seeds` is given.
    pub base_seed: u64,
    /// Explicit per-run seeds (overrides `runs`/`base_seed`).
    pub seeds: Option<Vec<u64>>,
    /// Neumann truncation order of the re-linearization.
    pub correction_order: usize,
    /// Fallback slope ε of the projection.
    pub epsilon: f64,
    /// Impulse-response MSE horizon (defaults to the model order).
    pub mse_horizon: Option<usize>,
    /// Re-linearization budget: number of Δ entries applied per sample
    /// (defaults to the model order, i.e. the exact first-order update).
    pub relin_budget: Option<usize>,
    /// Reuse the same input sequence on every run (fresh noise only).
    pub fixed_input: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            order: 50,
            samples: 250,
            input_std: 0.5,
            noise_std: 0.05,
            rls_f0: vec![0.1, 1.0, 10.0, 100.0],
            gamma: 1.0,
            eta1_init: 0.001f64.ln(),
            ratio_init: 0.9f64.ln(),
            runs: 10,
            base_seed: 1,
            seeds: None,
            correction_order: 1,
            epsilon: 1e-4,
            mse_horizon: None,
            relin_budget: None,
            fixed_input: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidArgument("order must be >= 1".into()));
        }
        if self.samples < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples".into()));
        }
        if !(self.input_std > 0.0) {
            return Err(Error::InvalidArgument("input_std must be > 0".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        if self.rls_f0.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidArgument("rls_f0 entries must be > 0".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("gamma must be >= 0".into()));
        }
        if self.run_seeds().is_empty() {
            return Err(Error::InvalidArgument("need at least one run".into()));
        }
        if self.correction_order == 0 {
            return Err(Error::InvalidArgument("correction_order must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        let h = self.mse_horizon();
        if h == 0 || h > self.order {
            return Err(Error::InvalidArgument(format!(
                "mse_horizon {h} out of range 1..={}",
                self.order
            )));
        }
        if self.order >= 2 && self.ratio_init >= 0.0 {
            return Err(Error::Constraint(
                "ratio_init must be negative (decaying prior variances)".into(),
            ));
        }
        Ok(())
    }

    pub fn mse_horizon(&self) -> usize {
        self.mse_horizon.unwrap_or(self.order)
    }

    /// Effective per-run seeds.
    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs as u64).map(|k| self.base_seed + k).collect(),
        }
    }

    /// Initial hyperparameter vector `η_k(0) = eta1_init + (k−1)·ratio_init`.
    pub fn eta0(&self) -> Result<HyperVector> {
        HyperVector::from_affine(self.eta1_init, -self.ratio_init, self.order)
    }

    /// Noise variance handed to the regularized estimator.
    pub fn sigma2(&self) -> f64 {
        let s = self.noise_std * self.noise_std;
        if s > 0.0 {
            s
        } else {
            SIGMA2_FLOOR
        }
    }

    /// Estimator names in output order.
    pub fn estimator_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rls_f0.iter().map(|f| format!("rls_f0_{f}")).collect();
        names.push("regularized".into());
        names
    }
}

/// Metric trajectories of one estimator: per-run series plus their mean.
#[derive(Debug, Clone)]
pub struct EstimatorSeries {
    pub name: String,
    pub mean: MetricsSeries,
    pub runs: Vec<MetricsSeries>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub estimators: Vec<EstimatorSeries>,
    /// SNR of each successful run, in seed order.
    pub snr_db: Vec<f64>,
    pub mean_snr_db: f64,
    pub run_seeds: Vec<u64>,
    /// Seeds of failed runs with the failure message.
    pub failed_runs: Vec<(u64, String)>,
}

impl ExperimentResult {
    pub fn failed_fraction(&self) -> f64 {
        self.failed_runs.len() as f64 / self.run_seeds.len() as f64
    }

    pub fn estimator(&self, name: &str) -> Option<&EstimatorSeries> {
        self.estimators.iter().find(|e| e.name == name)
    }
}

struct RunOutput {
    series: Vec<MetricsSeries>,
    snr_db: f64,
}

/// Which estimator to run on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    Rls { f0: f64 },
    Regularized,
}

impl EstimatorKind {
    /// Parse an estimator name as emitted by
    /// [`ExperimentConfig::estimator_names`].
    pub fn parse(name: &str) -> Result<Self> {
        if name == "regularized" {
            return Ok(Self::Regularized);
        }
        if let Some(f0) = name.strip_prefix("rls_f0_") {
            let f0: f64 = f0
                .parse()
                .map_err(|e| Error::Parse(format!("estimator name {name}: {e}")))?;
            return Ok(Self::Rls { f0 });
        }
        Err(Error::InvalidArgument(format!(
            "unknown estimator {name}; expected `regularized` or `rls_f0_<gain>`"
        )))
    }

    pub fn name(&self) -> String {
        match self {
            Self::Rls { f0 } => format!("rls_f0_{f0}"),
            Self::Regularized => "regularized".into(),
        }
    }
}

/// One estimator driven over one dataset.
#[derive(Debug, Clone)]
pub struct IdentifyOutput {
    pub series: MetricsSeries,
    /// Impulse-response taps of the final estimate.
    pub final_taps: Vec<f64>,
}

/// Dataset of one benchmark run: the noisy record plus the noise-free
/// output (used for SNR and model-quality scoring).
pub fn generate_run_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(DataRecord, Vec<f64>)> {
    let tf = nominal_model();
    let input_seed = if cfg.fixed_input {
        cfg.base_seed ^ INPUT_STREAM
    } else {
        seed ^ INPUT_STREAM
    };
    let u = gaussian_signal(cfg.samples, cfg.input_std, input_seed);
    let clean = tf.response(&u);
    let rec = simulate(&tf, &u, cfg.noise_std, seed ^ NOISE_STREAM)?;
    Ok((rec, clean))
}

/// Run one estimator sample-by-sample over a recorded dataset, scoring each
/// step against the nominal system.
pub fn identify_dataset(
    cfg: &ExperimentConfig,
    rec: &DataRecord,
    kind: &EstimatorKind,
) -> Result<IdentifyOutput> {
    let g_true = nominal_model().impulse_response(cfg.mse_horizon())?;
    match kind {
        EstimatorKind::Rls { f0 } => run_rls(cfg, rec, &g_true, *f0),
        EstimatorKind::Regularized => run_regularized(cfg, rec, &g_true),
    }
}

/// Run the full comparison: for every seed a fresh dataset, every estimator
/// driven sample by sample, metrics recorded after each update. Runs are
/// independent and reduced in seed order, so the output is deterministic for
/// a given seed list.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tf = nominal_model();
    let horizon = cfg.mse_horizon();
    let g_true = tf.impulse_response(horizon)?;
    let seeds = cfg.run_seeds();

    let run_one = |seed: &u64| -> (u64, Result<RunOutput>) { (*seed, run_single(cfg, *seed, &g_true)) };

    #[cfg(feature = "parallel")]
    let outputs: Vec<(u64, Result<RunOutput>)> = {
        use rayon::prelude::*;
        seeds.par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outputs: Vec<(u64, Result<RunOutput>)> = seeds.iter().map(run_one).collect();

    let names = cfg.estimator_names();
    let mut per_estimator: Vec<Vec<MetricsSeries>> = vec![Vec::new(); names.len()];
    let mut snrs = Vec::new();
    let mut failed = Vec::new();
    for (seed, out) in outputs {
        match out {
            Ok(run) => {
                for (slot, series) in per_estimator.iter_mut().zip(run.series) {
                    slot.push(series);
                }
                snrs.push(run.snr_db);
            }
            Err(e) => {
                log::warn!("run with seed {seed} failed: {e}");
                failed.push((seed, e.to_string()));
            }
        }
    }
    if snrs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all {} runs failed; first error: {}",
            seeds.len(),
            failed[0].1
        )));
    }

    let estimators = names
        .into_iter()
        .zip(per_estimator)
        .map(|(name, runs)| {
            let mean = MetricsSeries::mean_of(&runs)?;
            Ok(EstimatorSeries { name, mean, runs })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_snr_db = snrs.iter().sum::<f64>() / snrs.len() as f64;

    Ok(ExperimentResult {
        estimators,
        snr_db: snrs,
        mean_snr_db,
        run_seeds: seeds,
        failed_runs: failed,
    })
}

fn run_single(cfg: &ExperimentConfig, seed: u64, g_true: &[f64]) -> Result<RunOutput> {
    let (rec, clean) = generate_run_dataset(cfg, seed)?;
    let snr = if cfg.noise_std > 0.0 {
        snr_db(&clean, cfg.noise_std)?
    } else {
        f64::INFINITY
    };

    let mut series = Vec::with_capacity(cfg.rls_f0.len() + 1);
    for &f0 in &cfg.rls_f0 {
        series.push(run_rls(cfg, &rec, g_true, f0)?.series);
    }
    series.push(run_regularized(cfg, &rec, g_true)?.series);

    Ok(RunOutput {
        series,
        snr_db: snr,
    })
}

fn run_rls(
    cfg: &ExperimentConfig,
    rec: &DataRecord,
    g_true: &[f64],
    f0: f64,
) -> Result<IdentifyOutput> {
    let n = cfg.order;
    let mut state = RlsState::new(n, f0)?;
    let mut out = MetricsSeries::default();
    for i in 1..rec.y.len() {
        let phi = make_regressor(&rec.u, i, n);
        let eps = state.step(&phi, rec.y[i])?;
        out.records
            .push(score(cfg, rec, g_true, state.theta(), None, i, eps)?);
    }
    Ok(IdentifyOutput {
        series: out,
        final_taps: state.theta().as_slice().to_vec(),
    })
}

fn run_regularized(
    cfg: &ExperimentConfig,
    rec: &DataRecord,
    g_true: &[f64],
) -> Result<IdentifyOutput> {
    let n = cfg.order;
    let ctx = ProjectionContext::new(n, cfg.gamma, cfg.epsilon)?;
    let mut est =
        RegEstimator::new(cfg.eta0()?, cfg.sigma2())?.with_correction_order(cfg.correction_order)?;
    if let Some(m) = cfg.relin_budget {
        est = est.with_relinearization_budget(m);
    }
    let mut out = MetricsSeries::default();
    for i in 1..rec.y.len() {
        let phi = make_regressor(&rec.u, i, n);
        let d = est.step(&ctx, &phi, rec.y[i])?;
        let theta = est.theta();
        out.records.push(score(
            cfg,
            rec,
            g_true,
            &theta,
            Some(est.eta().as_slice().to_vec()),
            i,
            d.epsilon_o,
        )?);
    }
    Ok(IdentifyOutput {
        final_taps: est.theta().as_slice().to_vec(),
        series: out,
    })
}

fn score(
    cfg: &ExperimentConfig,
    rec: &DataRecord,
    g_true: &[f64],
    theta: &DVector<f64>,
    eta: Option<Vec<f64>>,
    t: usize,
    epsilon_o: f64,
) -> Result<MetricsRecord> {
    let horizon = cfg.mse_horizon();
    let mse = impulse_mse(theta.as_slice(), g_true, horizon)?;
    let y_hat = fir_predict(theta.as_slice(), &rec.u);
    let fit = fit_percent(&rec.y, &y_hat)?;
    Ok(MetricsRecord {
        t,
        mse_impulse: mse,
        fit_percent: fit,
        eta,
        epsilon_o,
    })
}

/// 17-significant-digit float formatting used by every CSV writer; parses
/// back to the identical bits.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write one metrics CSV: `t,mse_impulse,fit_percent` plus `eta_1..eta_n`
/// columns when the series carries hyperparameter snapshots. UTF-8, LF line
/// endings.
pub fn emit_csv(series: &MetricsSeries, path: &Path) -> Result<()> {
    emit_csv_with_sample_period(series, path, None)
}

/// [`emit_csv`] with the time axis relabeled in seconds: `t` is written as
/// `t·period`. Relabeled files are for plotting; [`parse_csv`] expects the
/// default integer axis.
pub fn emit_csv_with_sample_period(
    series: &MetricsSeries,
    path: &Path,
    period: Option<f64>,
) -> Result<()> {
    series.validate()?;
    if let Some(p) = period {
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample period must be finite and > 0, got {p}"
            )));
        }
    }
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    out.push_str("t,mse_impulse,fit_percent");
    let eta_len = series
        .records
        .first()
        .and_then(|r| r.eta.as_ref().map(Vec::len))
        .unwrap_or(0);
    for k in 1..=eta_len {
        out.push_str(&format!(",eta_{k}"));
    }
    out.push('\n');
    for r in &series.records {
        let t_label = match period {
            Some(p) => fmt(r.t as f64 * p),
            None => r.t.to_string(),
        };
        out.push_str(&format!(
            "{t_label},{},{}",
            fmt(r.mse_impulse),
            fmt(r.fit_percent)
        ));
        if let Some(eta) = &r.eta {
            for v in eta {
                out.push(',');
                out.push_str(&fmt(*v));
            }
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Strict inverse of [`emit_csv`]. The prediction-error column is not part
/// of the format; parsed records carry `epsilon_o = 0`.
pub fn parse_csv(path: &Path) -> Result<MetricsSeries> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "mse_impulse" || cols[2] != "fit_percent" {
        return Err(Error::Parse(format!("unexpected header: {header}")));
    }
    for (k, c) in cols[3..].iter().enumerate() {
        if *c != format!("eta_{}", k + 1) {
            return Err(Error::Parse(format!("unexpected column: {c}")));
        }
    }
    let eta_len = cols.len() - 3;
    let mut series = MetricsSeries::default();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
        };
        let t = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        let eta = if eta_len > 0 {
            let mut v = Vec::with_capacity(eta_len);
            for f in &fields[3..] {
                v.push(parse_f(f)?);
            }
            Some(v)
        } else {
            None
        };
        series.records.push(MetricsRecord {
            t,
            mse_impulse: parse_f(fields[1])?,
            fit_percent: parse_f(fields[2])?,
            eta,
            epsilon_o: 0.0,
        });
    }
    series.validate()?;
    Ok(series)
}

/// Write a dataset CSV with header `t,u,y`.
pub fn write_dataset_csv(rec: &DataRecord, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::from("t,u,y\n");
    for (i, (u, y)) in rec.u.iter().zip(&rec.y).enumerate() {
        out.push_str(&format!("{i},{},{}\n", fmt(*u), fmt(*y)));
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Read a dataset CSV produced by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("t,u,y") => {}
        other => {
            return Err(Error::Parse(format!(
                "unexpected dataset header: {other:?}"
            )))
        }
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "line {}: expected 3 fields",
                lineno + 2
            )));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
        };
        u.push(parse_f(fields[1])?);
        y.push(parse_f(fields[2])?);
    }
    Ok((u, y))
}
