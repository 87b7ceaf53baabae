use causalkit::bayes::*;
use causalkit::learners::{CvPlan, LogisticModel, Scoring};
use causalkit::meta::{fit_propensity, PropensityModel};
use causalkit::rng::rng_from;
use causalkit::synthetic::{generate, DgpKind, DgpSpec};
use causalkit::Dataset;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn flat_propensity(d: usize) -> PropensityModel {
    PropensityModel::new(
        LogisticModel {
            intercept: 0.0,
            weights: vec![0.0; d],
            lambda: 0.0,
            gradient_norm: 0.0,
            iterations: 0,
        },
        0.01,
    )
    .unwrap()
}

fn fitted_propensity(ds: &Dataset, seed: u64) -> PropensityModel {
    let plan = CvPlan::stratified(ds.t(), 5, Scoring::LogLoss, seed).unwrap();
    fit_propensity(ds, &[], &plan, 0.01).unwrap()
}

#[test]
fn gp_interpolates_noise_free_linear_truth() {
    let mut rng = rng_from(5);
    let n = 50;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.5 * x[(i, 0)] - 0.5 * x[(i, 1)] + t[i] as f64)
        .collect();
    let inputs = GpInputs::new(&x, &vec![0.5; n], &t).unwrap();
    let kernel = CompositeKernel {
        noise: 1e-6,
        ..CompositeKernel::default()
    };
    let fitted = gp_fitted_mean(&inputs, &y, &kernel).unwrap();
    let rmse = (fitted
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    assert!(rmse < 1e-3, "rmse {rmse}");
}

#[test]
fn gp_vanishing_treatment_kernel_collapses_effects() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Const, 300, 2)).unwrap();
    let mut cfg = GpConfig::new(2);
    cfg.optimize = false;
    cfg.init.amp_treatment = 1e-10;
    cfg.init.offset = 0.0;
    let fit = fit_gp(&ds, &flat_propensity(ds.d()), &cfg).unwrap();
    let m = ds.y().iter().sum::<f64>() / ds.n() as f64;
    let sd_y = (ds.y().iter().map(|v| (v - m).powi(2)).sum::<f64>() / ds.n() as f64).sqrt();
    assert!(fit.effect.ate().abs() < 0.05 * sd_y);
    assert!(fit.effect.ate_draws.iter().all(|a| a.abs() < 0.05 * sd_y));
}

#[test]
fn gp_ml2_does_not_lower_the_likelihood() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Het, 500, 3)).unwrap();
    let rho = fitted_propensity(&ds, 3);
    let fit = fit_gp(&ds, &rho, &GpConfig::new(3)).unwrap();
    assert_eq!(fit.optimization_rows, 500);
    assert!(fit.log_likelihood >= fit.initial_log_likelihood);
    let inputs = GpInputs::new(ds.x(), &rho.predict(ds.x()), ds.t()).unwrap();
    let m = ds.y().iter().sum::<f64>() / 500.0;
    let sd = (ds.y().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 500.0).sqrt();
    let y: Vec<f64> = ds.y().iter().map(|v| (v - m) / sd).collect();
    let again = log_marginal_likelihood(&inputs, &y, &fit.kernel).unwrap();
    assert!((again - fit.log_likelihood).abs() < 1e-6 * again.abs());
}

#[test]
fn gp_recovers_constant_effect() {
    let (ds, truth) = generate(&DgpSpec::new(DgpKind::Const, 1000, 4)).unwrap();
    let fit = fit_gp(&ds, &fitted_propensity(&ds, 4), &GpConfig::new(4)).unwrap();
    let sd = fit.effect.ate_sd();
    assert!(
        (fit.effect.ate() - truth.ate).abs() < 3.0 * sd.max(0.05),
        "{} ± {sd}",
        fit.effect.ate()
    );
    assert_eq!(fit.effect.draws.len(), 100);
}

#[test]
fn hlm_interval_covers_zero_under_null() {
    let mut covered = 0;
    for seed in 0..100 {
        let (ds, _) = generate(&DgpSpec::new(DgpKind::Null, 1000, 1000 + seed)).unwrap();
        let (post, _) = fit_hlm(
            &ds,
            &flat_propensity(ds.d()),
            &McmcConfig::desk(seed),
            &HlmPriors::default(),
        )
        .unwrap();
        let (lo, hi) = post.credible_interval(0.95);
        covered += usize::from(lo <= 0.0 && 0.0 <= hi);
    }
    assert!(covered >= 90, "covered {covered}/100");
}

#[test]
fn hlm_posterior_is_tight_on_a_constant_effect() {
    let (ds, truth) = generate(&DgpSpec::new(DgpKind::Const, 2000, 7)).unwrap();
    let (post, params) = fit_hlm(
        &ds,
        &fitted_propensity(&ds, 7),
        &McmcConfig::desk(3),
        &HlmPriors::default(),
    )
    .unwrap();
    let sd = post.ate_sd();
    assert!(sd < 0.15, "posterior sd {sd}");
    assert!(
        (post.ate() - truth.ate).abs() < 4.0 * sd + 0.1,
        "{}",
        post.ate()
    );
    // residual scale on the standardized outcome; noise is a small share of var(y)
    assert!(params.sigma > 0.1 && params.sigma < 0.6, "{}", params.sigma);
}

fn short_bcf() -> BcfConfig {
    BcfConfig {
        burn_in: 200,
        kept: 300,
        ..BcfConfig::default()
    }
}

#[test]
fn bcf_zero_effect() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Null, 1000, 5)).unwrap();
    let post = fit_bcf(&ds, &fitted_propensity(&ds, 5), &short_bcf(), 5).unwrap();
    assert!(
        post.ate().abs() < 3.0 * post.ate_sd(),
        "{} ± {}",
        post.ate(),
        post.ate_sd()
    );
}

#[test]
fn bcf_constant_effect_on_nonlinear_surface() {
    let (ds, truth) = generate(&DgpSpec::new(DgpKind::Nl, 2000, 6)).unwrap();
    let post = fit_bcf(&ds, &fitted_propensity(&ds, 6), &short_bcf(), 6).unwrap();
    assert!(
        (post.ate() - 5.0).abs() < 3.0 * post.ate_sd(),
        "{} ± {} (sample {})",
        post.ate(),
        post.ate_sd(),
        truth.ate
    );
    for (s, row) in post.draws.iter().enumerate() {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        assert!((post.ate_draws[s] - m).abs() < 1e-12);
    }
}

#[test]
fn bcf_rejects_bad_config_and_thin_arms() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Null, 100, 7)).unwrap();
    let rho = flat_propensity(ds.d());
    let bad = BcfConfig {
        alpha_treatment: 1.0,
        ..BcfConfig::default()
    };
    assert!(fit_bcf(&ds, &rho, &bad, 1).is_err());
    let rows: Vec<usize> = (0..ds.n())
        .filter(|&i| ds.t()[i] == 0)
        .chain((0..ds.n()).filter(|&i| ds.t()[i] == 1).take(5))
        .collect();
    assert!(fit_bcf(&ds.select_rows(&rows), &rho, &short_bcf(), 1).is_err());
}

#[test]
fn tree_prior_root_frequency() {
    for (alpha, beta) in [(0.95, 2.0), (0.25, 3.0)] {
        let f = sample_tree_prior(alpha, beta, 6, 30, 10_000, 10, 99);
        assert!((f - alpha).abs() < 0.02, "{alpha}: {f}");
    }
}
