//! Gaussian-process causal regression with a composite kernel
//!
//! ```text
//! k(⟨xᵢ,tᵢ⟩, ⟨xⱼ,tⱼ⟩) = σ²_μ·k_μ(zᵢ, zⱼ) + tᵢtⱼ·(σ²_τ·k_τ(xᵢ, xⱼ) + τ₀) + σ²·δᵢⱼ
//! ```
//!
//! with `z = [x, ρ(x)]` and Matérn-3/2 components. Writing the latent function
//! as `f(x, t) = μ(z) + t·h(x)`, the unit effect `f(x,1) − f(x,0)` is exactly
//! `h(x)`, whose prior covariance is `σ²_τ·k_τ + τ₀` and whose covariance with
//! training outcome `j` is `tⱼ·(σ²_τ·k_τ(x, xⱼ) + τ₀)`.
//!
//! Hyperparameters are fitted by maximizing the log marginal likelihood in
//! log-parameter space.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Side};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PosteriorEffect;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::meta::{EstimatorTag, PropensityModel};
use crate::rng::{derived_rng, Rng};

pub const MAX_DENSE_N: usize = 10_000;
pub const NOISE_FLOOR: f64 = 1e-6;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Matérn-3/2 correlation at distance `r` with length-scale `l`.
pub fn matern32(r: f64, l: f64) -> f64 {
    let a = SQRT3 * r / l;
    (1.0 + a) * (-a).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeKernel {
    pub length_prognostic: f64,
    pub amp_prognostic: f64,
    pub length_treatment: f64,
    pub amp_treatment: f64,
    pub offset: f64,
    pub noise: f64,
}

impl Default for CompositeKernel {
    fn default() -> Self {
        CompositeKernel {
            length_prognostic: 10.0,
            amp_prognostic: 1.0,
            length_treatment: 50.0,
            amp_treatment: 0.1,
            offset: 0.001,
            noise: 0.1,
        }
    }
}

impl CompositeKernel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.length_prognostic,
            self.amp_prognostic,
            self.length_treatment,
            self.amp_treatment,
            self.noise,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::contract(
                "kernel length-scales, amplitudes and noise must be positive",
            ));
        }
        if !(self.offset.is_finite() && self.offset >= 0.0) {
            return Err(Error::contract("kernel offset must be non-negative"));
        }
        Ok(())
    }

    fn to_log(self) -> [f64; 6] {
        [
            self.length_prognostic.ln(),
            self.amp_prognostic.ln(),
            self.length_treatment.ln(),
            self.amp_treatment.ln(),
            self.offset.max(OFFSET_FLOOR).ln(),
            self.noise.max(NOISE_FLOOR).ln(),
        ]
    }

    fn from_log(theta: &[f64; 6]) -> Self {
        CompositeKernel {
            length_prognostic: theta[0].exp(),
            amp_prognostic: theta[1].exp(),
            length_treatment: theta[2].exp(),
            amp_treatment: theta[3].exp(),
            offset: theta[4].exp(),
            noise: theta[5].exp(),
        }
    }
}

const OFFSET_FLOOR: f64 = 1e-10;

/// Box constraints on the log parameters.
const LOG_BOUNDS: [(f64, f64); 6] = [
    (-4.6, 9.3),  // l_μ ∈ [0.01, 1e4]
    (-18.5, 6.9), // σ²_μ ∈ [1e-8, 1e3]
    (-4.6, 9.3),  // l_τ
    (-18.5, 6.9), // σ²_τ
    (-23.0, 4.6), // τ₀ ∈ [1e-10, 1e2]
    (-13.8, 4.6), // σ² ∈ [1e-6, 1e2]
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpConfig {
    pub init: CompositeKernel,
    pub optimize: bool,
    pub draws: usize,
    /// Largest sample used for the marginal-likelihood fit; larger inputs are
    /// subsampled for the optimization only.
    pub ml2_max_n: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl GpConfig {
    pub fn new(seed: u64) -> Self {
        GpConfig {
            init: CompositeKernel::default(),
            optimize: true,
            draws: 100,
            ml2_max_n: 500,
            max_iter: 100,
            seed,
        }
    }
}

/// Training inputs: prognostic coordinates `[x, ρ]`, treatment coordinates `x`
/// and the treatment indicator.
#[derive(Debug, Clone)]
pub struct GpInputs {
    pub prognostic: DMatrix<f64>,
    pub treatment: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl GpInputs {
    pub fn new(x: &DMatrix<f64>, rho: &[f64], t: &[u8]) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || rho.len() != n || t.len() != n {
            return Err(Error::contract("GP inputs must be non-empty and aligned"));
        }
        let prognostic = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { rho[i] });
        Ok(GpInputs {
            prognostic,
            treatment: x.clone(),
            t: t.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    fn select(&self, rows: &[usize]) -> GpInputs {
        GpInputs {
            prognostic: self.prognostic.select_rows(rows),
            treatment: self.treatment.select_rows(rows),
            t: rows.iter().map(|&i| self.t[i]).collect(),
        }
    }
}

fn distances(a: &DMatrix<f64>) -> Result<Mat<f64>> {
    let n = a.nrows();
    let mut out = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let r = (0..a.ncols())
                .map(|c| (a[(i, c)] - a[(j, c)]).powi(2))
                .sum::<f64>()
                .sqrt();
            if !r.is_finite() {
                return Err(Error::contract("non-finite distance between GP inputs"));
            }
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    Ok(out)
}

/// Pairwise distances and treatment products, reused across kernel settings.
struct Geometry {
    r_prog: Mat<f64>,
    r_tau: Mat<f64>,
    t: Vec<f64>,
}

impl Geometry {
    fn new(inputs: &GpInputs) -> Result<Self> {
        Ok(Geometry {
            r_prog: distances(&inputs.prognostic)?,
            r_tau: distances(&inputs.treatment)?,
            t: inputs.t.clone(),
        })
    }

    fn n(&self) -> usize {
        self.t.len()
    }

    fn covariance(&self, k: &CompositeKernel) -> Mat<f64> {
        let n = self.n();
        Mat::from_fn(n, n, |i, j| {
            let mut v = k.amp_prognostic * matern32(self.r_prog[(i, j)], k.length_prognostic);
            let tt = self.t[i] * self.t[j];
            if tt != 0.0 {
                v += tt
                    * (k.amp_treatment * matern32(self.r_tau[(i, j)], k.length_treatment)
                        + k.offset);
            }
            if i == j {
                v += k.noise;
            }
            v
        })
    }
}

/// Training covariance of the composite kernel, noise included on the diagonal.
pub fn assemble_gp_covariance(inputs: &GpInputs, kernel: &CompositeKernel) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let k = Geometry::new(inputs)?.covariance(kernel);
    Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)]))
}

/// Cholesky factor of `k`, adding `c·mean(diag)` jitter for c = 1e-8, 1e-7, …,
/// 1e-2 if the plain factorization fails.
fn cholesky_with_jitter(k: &Mat<f64>) -> Result<Llt<f64>> {
    if let Ok(llt) = k.llt(Side::Lower) {
        return Ok(llt);
    }
    let n = k.nrows();
    let mean_diag = (0..n).map(|i| k[(i, i)]).sum::<f64>() / n as f64;
    let mut c = JITTER_START;
    while c <= JITTER_MAX * 1.000_001 {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += c * mean_diag;
        }
        if let Ok(llt) = kj.llt(Side::Lower) {
            log::debug!("covariance factorized with relative jitter {c:e}");
            return Ok(llt);
        }
        c *= 10.0;
    }
    Err(Error::numerical(
        "covariance not positive definite even after jitter escalation",
    ))
}

fn column(y: &[f64]) -> Mat<f64> {
    Mat::from_fn(y.len(), 1, |i, _| y[i])
}

fn log_det(llt: &Llt<f64>) -> f64 {
    let l = llt.L();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

fn lml_value(geom: &Geometry, y: &[f64], k: &CompositeKernel) -> Result<f64> {
    let llt = cholesky_with_jitter(&geom.covariance(k))?;
    let alpha = llt.solve(column(y));
    let fit: f64 = (0..y.len()).map(|i| y[i] * alpha[(i, 0)]).sum();
    let n = y.len() as f64;
    Ok(-0.5 * fit - 0.5 * log_det(&llt) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Log marginal likelihood and its gradient with respect to the log parameters.
fn lml_and_gradient(geom: &Geometry, y: &[f64], k: &CompositeKernel) -> Result<(f64, [f64; 6])> {
    let n = geom.n();
    let llt = cholesky_with_jitter(&geom.covariance(k))?;
    let alpha = llt.solve(column(y));
    let fit: f64 = (0..n).map(|i| y[i] * alpha[(i, 0)]).sum();
    let value =
        -0.5 * fit - 0.5 * log_det(&llt) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = llt.inverse();
    let mut grad = [0.0f64; 6];
    for j in 0..n {
        for i in 0..n {
            let w = alpha[(i, 0)] * alpha[(j, 0)] - kinv[(i, j)];
            let rp = geom.r_prog[(i, j)];
            let ap = SQRT3 * rp / k.length_prognostic;
            let ep = (-ap).exp();
            grad[0] += w * k.amp_prognostic * ap * ap * ep;
            grad[1] += w * k.amp_prognostic * (1.0 + ap) * ep;
            let tt = geom.t[i] * geom.t[j];
            if tt != 0.0 {
                let rt = geom.r_tau[(i, j)];
                let at = SQRT3 * rt / k.length_treatment;
                let et = (-at).exp();
                grad[2] += w * tt * k.amp_treatment * at * at * et;
                grad[3] += w * tt * k.amp_treatment * (1.0 + at) * et;
                grad[4] += w * tt * k.offset;
            }
            if i == j {
                grad[5] += w * k.noise;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

/// Log marginal likelihood of centered outcomes `y` under `kernel`.
pub fn log_marginal_likelihood(
    inputs: &GpInputs,
    y: &[f64],
    kernel: &CompositeKernel,
) -> Result<f64> {
    kernel.validate()?;
    if y.len() != inputs.n() {
        return Err(Error::contract("outcome length does not match GP inputs"));
    }
    lml_value(&Geometry::new(inputs)?, y, kernel)
}

fn project(theta: &mut [f64; 6]) {
    for (v, (lo, hi)) in theta.iter_mut().zip(LOG_BOUNDS) {
        *v = v.clamp(lo, hi);
    }
}

/// Gradient components that do not push against an active bound.
fn free_gradient(theta: &[f64; 6], g: &[f64; 6]) -> [f64; 6] {
    let mut out = *g;
    for i in 0..6 {
        let (lo, hi) = LOG_BOUNDS[i];
        // `g` is the gradient of the quantity being minimized.
        if (theta[i] <= lo && g[i] > 0.0) || (theta[i] >= hi && g[i] < 0.0) {
            out[i] = 0.0;
        }
    }
    out
}

/// Minimize the negative log marginal likelihood from `start` with a projected
/// BFGS iteration. Returns the best kernel and its log marginal likelihood.
fn maximize_from(
    geom: &Geometry,
    y: &[f64],
    start: &CompositeKernel,
    max_iter: usize,
) -> Result<(CompositeKernel, f64)> {
    let mut theta = start.to_log();
    project(&mut theta);
    let eval = |th: &[f64; 6]| -> Result<(f64, [f64; 6])> {
        let (v, g) = lml_and_gradient(geom, y, &CompositeKernel::from_log(th))?;
        Ok((-v, g.map(|x| -x)))
    };
    let (mut f, g0) = eval(&theta)?;
    let mut g = free_gradient(&theta, &g0);
    let mut h = [[0.0f64; 6]; 6];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..max_iter {
        let mut dir = [0.0f64; 6];
        for i in 0..6 {
            dir[i] = -(0..6).map(|j| h[i][j] * g[j]).sum::<f64>();
        }
        let mut slope: f64 = (0..6).map(|i| dir[i] * g[i]).sum();
        if slope >= 0.0 {
            for (i, row) in h.iter_mut().enumerate() {
                *row = [0.0; 6];
                row[i] = 1.0;
            }
            dir = g.map(|x| -x);
            slope = -g.iter().map(|x| x * x).sum::<f64>();
        }
        if slope.abs() < 1e-10 {
            break;
        }
        let longest = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if longest > 2.0 { 2.0 / longest } else { 1.0 };
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = theta;
            for i in 0..6 {
                trial[i] += step * dir[i];
            }
            project(&mut trial);
            if let Ok((ft, gt)) = eval(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next, fn_, gn_raw)) = accepted else {
            break;
        };
        let gn = free_gradient(&next, &gn_raw);
        let s: Vec<f64> = (0..6).map(|i| next[i] - theta[i]).collect();
        let yv: Vec<f64> = (0..6).map(|i| gn[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-10 {
            let hy: Vec<f64> = (0..6)
                .map(|i| (0..6).map(|j| h[i][j] * yv[j]).sum())
                .collect();
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..6 {
                for j in 0..6 {
                    h[i][j] +=
                        (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        let improvement = f - fn_;
        theta = next;
        f = fn_;
        g = gn;
        if improvement < 1e-9 * (1.0 + f.abs()) {
            break;
        }
    }
    Ok((CompositeKernel::from_log(&theta), -f))
}

/// Multi-start ML-II: the initial kernel, and the same with all length-scales
/// scaled by 0.1 and by 10. Returns the best kernel, its log marginal
/// likelihood and the log marginal likelihood of `init`.
pub fn optimize_kernel(
    inputs: &GpInputs,
    y: &[f64],
    init: &CompositeKernel,
    max_iter: usize,
) -> Result<(CompositeKernel, f64, f64)> {
    init.validate()?;
    let geom = Geometry::new(inputs)?;
    let mut start = *init;
    start.noise = start.noise.max(NOISE_FLOOR);
    start.offset = start.offset.max(OFFSET_FLOOR);
    let init_lml = lml_value(&geom, y, &start)?;
    let mut best = (start, init_lml);
    for factor in [1.0, 0.1, 10.0] {
        let mut s = start;
        s.length_prognostic *= factor;
        s.length_treatment *= factor;
        match maximize_from(&geom, y, &s, max_iter) {
            Ok((k, v)) if v > best.1 => best = (k, v),
            Ok(_) => {}
            Err(e) => log::warn!("ML-II start with length factor {factor} failed: {e}"),
        }
    }
    Ok((best.0, best.1, init_lml))
}

/// Posterior of `h(x) = f(x,1) − f(x,0)` at the training inputs given centered
/// outcomes `y`: returns the mean and `draws` joint samples.
pub fn gp_posterior(
    inputs: &GpInputs,
    y: &[f64],
    kernel: &CompositeKernel,
    draws: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    kernel.validate()?;
    let n = inputs.n();
    if y.len() != n {
        return Err(Error::contract("outcome length does not match GP inputs"));
    }
    let geom = Geometry::new(inputs)?;
    let llt = cholesky_with_jitter(&geom.covariance(kernel))?;
    let prior_h = |i: usize, j: usize| {
        kernel.amp_treatment * matern32(geom.r_tau[(i, j)], kernel.length_treatment) + kernel.offset
    };
    // Cross-covariance C[i, j] = Cov(h(xᵢ), yⱼ).
    let cross = Mat::from_fn(n, n, |i, j| geom.t[j] * prior_h(i, j));
    let alpha = llt.solve(column(y));
    let mean_m = &cross * &alpha;
    let mean: Vec<f64> = (0..n).map(|i| mean_m[(i, 0)]).collect();
    // cov = K_hh − C K⁻¹ Cᵀ = K_hh − VᵀV with V = L⁻¹ Cᵀ.
    let mut v = cross.transpose().to_owned();
    llt.L().solve_lower_triangular_in_place(v.as_mut());
    let vtv = v.transpose() * &v;
    let cov = Mat::from_fn(n, n, |i, j| {
        let c = prior_h(i, j) - vtv[(i, j)];
        if i == j {
            c.max(0.0)
        } else {
            c
        }
    });
    let cov = Mat::from_fn(n, n, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let chol = cholesky_with_jitter(&cov)?;
    let l = chol.L();
    let z = Mat::from_fn(n, draws, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lz = l * &z;
    let samples = (0..draws)
        .map(|s| (0..n).map(|i| mean[i] + lz[(i, s)]).collect())
        .collect();
    Ok((mean, samples))
}

/// Posterior mean of the noise-free latent `f` at the training inputs.
pub fn gp_fitted_mean(inputs: &GpInputs, y: &[f64], kernel: &CompositeKernel) -> Result<Vec<f64>> {
    kernel.validate()?;
    let geom = Geometry::new(inputs)?;
    let k = geom.covariance(kernel);
    let llt = cholesky_with_jitter(&k)?;
    let alpha = llt.solve(column(y));
    let mut kf = k;
    for i in 0..geom.n() {
        kf[(i, i)] -= kernel.noise;
    }
    let m = &kf * &alpha;
    Ok((0..geom.n()).map(|i| m[(i, 0)]).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpFit {
    pub kernel: CompositeKernel,
    pub effect: PosteriorEffect,
    /// Log marginal likelihood of the initial and fitted kernels on the
    /// optimization sample (standardized outcome).
    pub initial_log_likelihood: f64,
    pub log_likelihood: f64,
    pub optimization_rows: usize,
}

pub fn fit_gp(ds: &Dataset, rho: &PropensityModel, cfg: &GpConfig) -> Result<GpFit> {
    let n = ds.n();
    if n > MAX_DENSE_N {
        return Err(Error::contract(format!(
            "GP uses dense factorization and accepts at most {MAX_DENSE_N} rows, got {n}"
        )));
    }
    if rho.n_features() != ds.d() {
        return Err(Error::contract(
            "propensity model and dataset disagree on features",
        ));
    }
    if cfg.draws == 0 {
        return Err(Error::contract("GP needs at least one posterior draw"));
    }
    let y_mean = ds.y().iter().sum::<f64>() / n as f64;
    let y_sd = (ds.y().iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let y_sd = if y_sd > 0.0 { y_sd } else { 1.0 };
    let y: Vec<f64> = ds.y().iter().map(|v| (v - y_mean) / y_sd).collect();
    let inputs = GpInputs::new(ds.x(), &rho.predict(ds.x()), ds.t())?;

    let (kernel, lml, init_lml, rows) = if cfg.optimize {
        let (sub_inputs, sub_y) = if n > cfg.ml2_max_n {
            let mut rng = derived_rng(cfg.seed, "gp-ml2-rows", 0);
            let mut rows = sample(&mut rng, n, cfg.ml2_max_n).into_vec();
            rows.sort_unstable();
            let sy: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            (inputs.select(&rows), sy)
        } else {
            (inputs.clone(), y.clone())
        };
        let (k, v, v0) = optimize_kernel(&sub_inputs, &sub_y, &cfg.init, cfg.max_iter)?;
        (k, v, v0, sub_y.len())
    } else {
        let v = log_marginal_likelihood(&inputs, &y, &cfg.init)?;
        (cfg.init, v, v, n)
    };

    let mut rng = derived_rng(cfg.seed, "gp-posterior", 0);
    let (_, samples) = gp_posterior(&inputs, &y, &kernel, cfg.draws, &mut rng)?;
    let draws = samples
        .into_iter()
        .map(|s| s.into_iter().map(|v| v * y_sd).collect())
        .collect();
    let effect = PosteriorEffect::from_draws(EstimatorTag::BayesGp, draws)?;
    Ok(GpFit {
        kernel,
        effect,
        initial_log_likelihood: init_lml,
        log_likelihood: lml,
        optimization_rows: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_inputs(n: usize, seed: u64) -> GpInputs {
        let mut rng = rng_from(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rho: Vec<f64> = (0..n).map(|i| 0.3 + 0.01 * i as f64 / n as f64).collect();
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        GpInputs::new(&x, &rho, &t).unwrap()
    }

    #[test]
    fn matern_reference_values() {
        assert_eq!(matern32(0.0, 1.0), 1.0);
        // (1 + √3)·exp(−√3), evaluated independently.
        assert_abs_diff_eq!(matern32(1.0, 1.0), 0.483_357_724_596_508, epsilon = 1e-12);
        // Scale invariance in r/l.
        assert_abs_diff_eq!(matern32(2.0, 2.0), matern32(1.0, 1.0), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn matern_bounded_and_decreasing(r in 0.0f64..50.0, dr in 1e-3f64..5.0, l in 0.1f64..20.0) {
            let a = matern32(r, l);
            let b = matern32(r + dr, l);
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(b < a);
        }
    }

    #[test]
    fn covariance_diagonal_and_control_pairs() {
        let inputs = toy_inputs(6, 1);
        let k = CompositeKernel {
            length_prognostic: 2.0,
            amp_prognostic: 1.3,
            length_treatment: 3.0,
            amp_treatment: 0.7,
            offset: 0.2,
            noise: 0.05,
        };
        let c = assemble_gp_covariance(&inputs, &k).unwrap();
        for i in 0..6 {
            let expect = 1.3 + inputs.t[i] * (0.7 + 0.2) + 0.05;
            assert_abs_diff_eq!(c[(i, i)], expect, epsilon = 1e-14);
        }
        // Units 0 and 2 are both controls: only the prognostic term remains.
        let r: f64 = (0..3)
            .map(|c| (inputs.prognostic[(0, c)] - inputs.prognostic[(2, c)]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_eq!(c[(0, 2)], 1.3 * matern32(r, 2.0));
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn covariance_is_psd() {
        let inputs = toy_inputs(80, 2);
        let mut k = CompositeKernel::default();
        k.noise = 0.0 + 1e-12;
        let c = assemble_gp_covariance(&inputs, &k).unwrap();
        let eig = c.symmetric_eigenvalues();
        assert!(eig.min() > -1e-8, "{}", eig.min());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let inputs = toy_inputs(40, 3);
        let geom = Geometry::new(&inputs).unwrap();
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let k = CompositeKernel {
            length_prognostic: 1.5,
            amp_prognostic: 0.8,
            length_treatment: 2.5,
            amp_treatment: 0.3,
            offset: 0.05,
            noise: 0.2,
        };
        let (_, g) = lml_and_gradient(&geom, &y, &k).unwrap();
        let theta = k.to_log();
        for p in 0..6 {
            let h = 1e-5;
            let (mut a, mut b) = (theta, theta);
            a[p] += h;
            b[p] -= h;
            let fa = lml_value(&geom, &y, &CompositeKernel::from_log(&a)).unwrap();
            let fb = lml_value(&geom, &y, &CompositeKernel::from_log(&b)).unwrap();
            let fd = (fa - fb) / (2.0 * h);
            assert!(
                (fd - g[p]).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {p}: {fd} vs {}",
                g[p]
            );
        }
    }

    #[test]
    fn jitter_rescues_a_singular_matrix() {
        let k = Mat::from_fn(3, 3, |_, _| 1.0);
        assert!(k.llt(Side::Lower).is_err());
        assert!(cholesky_with_jitter(&k).is_ok());
        let neg = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(cholesky_with_jitter(&neg).is_err());
    }
}
