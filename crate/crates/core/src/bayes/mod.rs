//! Bayesian causal models of the form `y ~ N(μ₀(x, ρ(x)) + τ(x)·t, σ²)`:
//! a hierarchical linear model, a Gaussian process with a composite treatment
//! kernel, and a Bayesian causal forest.
//!
//! All three standardize the outcome internally and report effects on the
//! original scale.

pub mod bcf;
pub mod gp;
pub mod hlm;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::quantile_sorted;
use crate::error::{Error, Result};
use crate::meta::EstimatorTag;
use crate::rng::Rng;

pub use bcf::{fit_bcf, sample_tree_prior, BcfConfig};
pub use gp::{
    assemble_gp_covariance, fit_gp, gp_fitted_mean, gp_posterior, log_marginal_likelihood,
    matern32, optimize_kernel, CompositeKernel, GpConfig, GpFit, GpInputs,
};
pub use hlm::{fit_hlm, HlmParams, HlmPriors, McmcConfig};

/// Posterior draws of unit-level treatment effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEffect {
    pub tag: EstimatorTag,
    /// `draws[s][i]` is τ⁽ˢ⁾(xᵢ).
    pub draws: Vec<Vec<f64>>,
    /// `ate_draws[s]` is the mean of `draws[s]`.
    pub ate_draws: Vec<f64>,
    /// Posterior mean CATE per unit.
    pub cate_mean: Vec<f64>,
    /// Split-chain potential scale reduction of the monitored quantity, if computed.
    pub rhat: Option<f64>,
    pub converged: bool,
}

impl PosteriorEffect {
    pub fn from_draws(tag: EstimatorTag, draws: Vec<Vec<f64>>) -> Result<Self> {
        if draws.is_empty() || draws[0].is_empty() {
            return Err(Error::contract(
                "posterior needs at least one draw of one unit",
            ));
        }
        let n = draws[0].len();
        if draws.iter().any(|d| d.len() != n) {
            return Err(Error::contract("posterior draws differ in length"));
        }
        if draws.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "posterior draws contain non-finite values",
            ));
        }
        let ate_draws: Vec<f64> = draws
            .iter()
            .map(|d| d.iter().sum::<f64>() / n as f64)
            .collect();
        let s = draws.len() as f64;
        let cate_mean = (0..n)
            .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / s)
            .collect();
        Ok(PosteriorEffect {
            tag,
            draws,
            ate_draws,
            cate_mean,
            rhat: None,
            converged: true,
        })
    }

    /// Posterior mean ATE, the average of all τ⁽ˢ⁾(xᵢ).
    pub fn ate(&self) -> f64 {
        self.ate_draws.iter().sum::<f64>() / self.ate_draws.len() as f64
    }

    pub fn ate_sd(&self) -> f64 {
        let m = self.ate();
        let s = self.ate_draws.len();
        if s < 2 {
            return 0.0;
        }
        (self
            .ate_draws
            .iter()
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / (s - 1) as f64)
            .sqrt()
    }

    /// Equal-tailed credible interval for the ATE.
    pub fn credible_interval(&self, level: f64) -> (f64, f64) {
        let mut sorted = self.ate_draws.clone();
        sorted.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        (
            quantile_sorted(&sorted, a),
            quantile_sorted(&sorted, 1.0 - a),
        )
    }
}

/// Split-chain R̂ of a single chain: the chain is cut into two halves that are
/// treated as separate chains.
pub fn split_rhat(chain: &[f64]) -> f64 {
    let half = chain.len() / 2;
    if half < 2 {
        return f64::NAN;
    }
    let parts = [&chain[..half], &chain[half..2 * half]];
    let m = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / m).collect();
    let vars: Vec<f64> = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1.0))
        .collect();
    let grand = (means[0] + means[1]) / 2.0;
    let between = m * ((means[0] - grand).powi(2) + (means[1] - grand).powi(2));
    let within = (vars[0] + vars[1]) / 2.0;
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (m - 1.0) / m * within + between / m;
    (var_plus / within).sqrt()
}

/// Draw from InvGamma(shape, scale), i.e. `scale / Gamma(shape, 1)`.
pub(crate) fn inv_gamma(rng: &mut Rng, shape: f64, scale: f64) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    scale / g.max(f64::MIN_POSITIVE)
}

/// One univariate slice-sampling update (stepping out and shrinkage) of `x0`
/// under the log density `log_f`, restricted to `x < upper`.
pub(crate) fn slice_sample<F: Fn(f64) -> f64>(
    rng: &mut Rng,
    x0: f64,
    log_f: F,
    width: f64,
    upper: f64,
) -> f64 {
    let level = log_f(x0) + rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
    let mut left = x0 - width * rng.random::<f64>();
    let mut right = (left + width).min(upper);
    let mut steps = 0;
    while steps < 50 && log_f(left) > level {
        left -= width;
        steps += 1;
    }
    steps = 0;
    while steps < 50 && right < upper && log_f(right) > level {
        right = (right + width).min(upper);
        steps += 1;
    }
    for _ in 0..200 {
        let x = left + (right - left) * rng.random::<f64>();
        if x < upper && log_f(x) > level {
            return x;
        }
        if x < x0 {
            left = x;
        } else {
            right = x;
        }
    }
    x0
}
