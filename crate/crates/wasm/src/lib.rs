//! Browser bindings: kernel curves, ATE estimates on simulated data and
//! bootstrap distributions. Every entry point returns JSON text.

use causalkit::bayes::matern32;
use causalkit::inference::{
    bootstrap_effect, reference_estimators, BootstrapConfig, EffectEstimator,
};
use causalkit::learners::{CvPlan, LearnerClass, LearnerGrid, Scoring};
use causalkit::meta::{ate_doubly_robust, cate_t_learner, fit_propensity, fit_t_learner};
use causalkit::synthetic::{generate, DgpKind, DgpSpec};
use causalkit::{Dataset, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_N: usize = 5000;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub r: Vec<f64>,
    pub k: Vec<f64>,
}

/// Matérn-3/2 correlation on `points` distances in `[0, r_max]`.
pub fn kernel_curve_data(length: f64, r_max: f64, points: usize) -> Result<Curve> {
    if !(length > 0.0 && r_max > 0.0) || points < 2 {
        return Err(causalkit::Error::Contract(
            "length-scale and range must be positive, with at least 2 points".into(),
        ));
    }
    let r: Vec<f64> = (0..points)
        .map(|i| r_max * i as f64 / (points - 1) as f64)
        .collect();
    let k = r.iter().map(|&d| matern32(d, length)).collect();
    Ok(Curve { r, k })
}

#[derive(Debug, Serialize)]
pub struct Estimates {
    pub dgp: String,
    pub n: usize,
    pub truth: f64,
    pub naive: f64,
    pub ols: f64,
    pub t_learner: f64,
    pub doubly_robust: f64,
    pub propensity_auc: Option<f64>,
}

fn parse_class(name: &str) -> Result<LearnerClass> {
    match name.to_ascii_lowercase().as_str() {
        "lasso" => Ok(LearnerClass::Lasso),
        "ridge" => Ok(LearnerClass::Ridge),
        "gbr" => Ok(LearnerClass::Gbr),
        other => Err(causalkit::Error::Contract(format!(
            "unknown learner '{other}'"
        ))),
    }
}

fn simulate(dgp: &str, n: usize, selection: f64, seed: u64) -> Result<(Dataset, f64)> {
    if n > MAX_N {
        return Err(causalkit::Error::Contract(format!(
            "the demo is limited to n <= {MAX_N}"
        )));
    }
    let kind: DgpKind = dgp.parse()?;
    let (ds, truth) = generate(&DgpSpec::new(kind, n, seed).with_selection(selection))?;
    Ok((ds, truth.ate))
}

pub fn estimate_data(
    dgp: &str,
    n: usize,
    selection: f64,
    learner: &str,
    seed: u64,
) -> Result<Estimates> {
    let (ds, truth) = simulate(dgp, n, selection, seed)?;
    let reference = reference_estimators(&ds)?;
    let plan = CvPlan::stratified(ds.t(), 5, Scoring::NegMse, seed)?;
    let pair = fit_t_learner(&ds, &LearnerGrid::new(parse_class(learner)?), &plan, seed)?;
    let rho = fit_propensity(&ds, &[], &plan, causalkit::meta::DEFAULT_EPSILON)?;
    Ok(Estimates {
        dgp: dgp.to_ascii_uppercase(),
        n,
        truth,
        naive: reference.difference_in_means,
        ols: reference.ols_with_controls,
        t_learner: cate_t_learner(&pair, &ds)?.ate(),
        doubly_robust: ate_doubly_robust(&ds, &pair, &rho)?.0,
        propensity_auc: rho.holdout_auc,
    })
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub truth: f64,
    pub draws: Vec<f64>,
    pub grand_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn bootstrap_data(
    dgp: &str,
    n: usize,
    replicates: usize,
    learner: &str,
    seed: u64,
) -> Result<Histogram> {
    let (ds, truth) = simulate(dgp, n, 1.0, seed)?;
    let mut cfg = BootstrapConfig::new(seed);
    cfg.replicates = replicates;
    let boot = bootstrap_effect(
        &ds,
        &EffectEstimator::t_learner(parse_class(learner)?),
        &cfg,
    )?;
    Ok(Histogram {
        truth,
        draws: boot.ate_draws,
        grand_mean: boot.grand_mean,
        ci_low: boot.ci.low,
        ci_high: boot.ci.high,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn kernel_curve(
    length: f64,
    r_max: f64,
    points: usize,
) -> std::result::Result<String, JsError> {
    to_js(kernel_curve_data(length, r_max, points))
}

#[wasm_bindgen]
pub fn estimate_ate(
    dgp: &str,
    n: usize,
    selection: f64,
    learner: &str,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(estimate_data(dgp, n, selection, learner, seed as u64))
}

#[wasm_bindgen]
pub fn bootstrap_ate(
    dgp: &str,
    n: usize,
    replicates: usize,
    learner: &str,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(bootstrap_data(dgp, n, replicates, learner, seed as u64))
}
