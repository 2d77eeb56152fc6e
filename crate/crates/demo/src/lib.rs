//! Interactive browser demo: simulate the benchmark system, identify it
//! online with the regularized estimator and the RLS baselines, and explore
//! how the kernel hyperparameters evolve.
//!
//! Every exported function returns a JSON string; the static page in `www/`
//! parses it and draws the curves on plain canvases.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use regid::experiment::{generate_run_dataset, identify_dataset, EstimatorKind, ExperimentConfig};
use regid::lti::nominal_model;
use regid::prior::DiKernelView;

fn err_to_js(e: regid::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Thin wasm exports over the host-testable `*_json` functions.
#[wasm_bindgen]
pub fn impulse_response(horizon: u32) -> Result<String, JsValue> {
    impulse_response_json(horizon).map_err(err_to_js)
}

#[wasm_bindgen]
pub fn run_identification(
    samples: u32,
    noise_std: f64,
    gamma: f64,
    beta_init: f64,
    order: u32,
    seed: u32,
) -> Result<String, JsValue> {
    run_identification_json(samples, noise_std, gamma, beta_init, order, seed).map_err(err_to_js)
}

#[wasm_bindgen]
pub fn hyperparameter_trajectories(
    samples: u32,
    noise_std: f64,
    gamma: f64,
    beta_init: f64,
    order: u32,
    seed: u32,
) -> Result<String, JsValue> {
    hyperparameter_trajectories_json(samples, noise_std, gamma, beta_init, order, seed)
        .map_err(err_to_js)
}

fn config(samples: u32, noise_std: f64, gamma: f64, beta_init: f64, order: u32) -> ExperimentConfig {
    ExperimentConfig {
        order: order as usize,
        samples: samples as usize,
        noise_std,
        gamma,
        eta1_init: beta_init.ln(),
        runs: 1,
        ..ExperimentConfig::default()
    }
}

#[derive(Serialize)]
struct ImpulseResponse {
    taps: Vec<f64>,
}

/// Impulse response of the benchmark system.
pub fn impulse_response_json(horizon: u32) -> regid::Result<String> {
    let taps = nominal_model().impulse_response(horizon.max(1) as usize)?;
    Ok(serde_json::to_string(&ImpulseResponse { taps }).unwrap())
}

#[derive(Serialize)]
struct EstimatorCurves {
    name: String,
    mse: Vec<f64>,
    fit: Vec<f64>,
    final_taps: Vec<f64>,
}

#[derive(Serialize)]
struct IdentificationRun {
    t: Vec<usize>,
    snr_db: f64,
    true_taps: Vec<f64>,
    estimators: Vec<EstimatorCurves>,
}

/// One identification run: the regularized estimator against the four RLS
/// baselines on a fresh dataset.
pub fn run_identification_json(
    samples: u32,
    noise_std: f64,
    gamma: f64,
    beta_init: f64,
    order: u32,
    seed: u32,
) -> regid::Result<String> {
    let cfg = config(samples, noise_std, gamma, beta_init, order);
    cfg.validate()?;
    let (rec, clean) = generate_run_dataset(&cfg, seed as u64)?;
    let snr_db = if noise_std > 0.0 {
        regid::metrics::snr_db(&clean, noise_std)?
    } else {
        f64::INFINITY
    };

    let mut kinds: Vec<EstimatorKind> = cfg
        .rls_f0
        .iter()
        .map(|&f0| EstimatorKind::Rls { f0 })
        .collect();
    kinds.push(EstimatorKind::Regularized);

    let mut t = Vec::new();
    let mut estimators = Vec::new();
    for kind in &kinds {
        let out = identify_dataset(&cfg, &rec, kind)?;
        if t.is_empty() {
            t = out.series.records.iter().map(|r| r.t).collect();
        }
        estimators.push(EstimatorCurves {
            name: kind.name(),
            mse: out.series.records.iter().map(|r| r.mse_impulse).collect(),
            fit: out.series.records.iter().map(|r| r.fit_percent).collect(),
            final_taps: out.final_taps,
        });
    }

    let true_taps = nominal_model().impulse_response(cfg.order)?;
    Ok(serde_json::to_string(&IdentificationRun {
        t,
        snr_db,
        true_taps,
        estimators,
    })
    .unwrap())
}

#[derive(Serialize)]
struct HyperTrajectories {
    t: Vec<usize>,
    eta_first: Vec<f64>,
    eta_mid: Vec<f64>,
    eta_last: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    lambda: Vec<f64>,
}

/// Hyperparameter evolution of the regularized estimator over one run.
pub fn hyperparameter_trajectories_json(
    samples: u32,
    noise_std: f64,
    gamma: f64,
    beta_init: f64,
    order: u32,
    seed: u32,
) -> regid::Result<String> {
    let cfg = config(samples, noise_std, gamma, beta_init, order);
    cfg.validate()?;
    let (rec, _) = generate_run_dataset(&cfg, seed as u64)?;
    let out = identify_dataset(&cfg, &rec, &EstimatorKind::Regularized)?;

    let mid = cfg.order / 2;
    let mut traj = HyperTrajectories {
        t: Vec::new(),
        eta_first: Vec::new(),
        eta_mid: Vec::new(),
        eta_last: Vec::new(),
        alpha: Vec::new(),
        beta: Vec::new(),
        lambda: Vec::new(),
    };
    for r in &out.series.records {
        let eta = r.eta.as_ref().expect("regularized series carries eta");
        traj.t.push(r.t);
        traj.eta_first.push(eta[0]);
        traj.eta_mid.push(eta[mid]);
        traj.eta_last.push(eta[cfg.order - 1]);
        match DiKernelView::from_eta(eta) {
            Ok(view) => {
                traj.alpha.push(-view.lambda.ln());
                traj.beta.push(view.beta);
                traj.lambda.push(view.lambda);
            }
            Err(_) => {
                traj.alpha.push(f64::NAN);
                traj.beta.push(f64::NAN);
                traj.lambda.push(f64::NAN);
            }
        }
    }
    Ok(serde_json::to_string(&traj).unwrap())
}
