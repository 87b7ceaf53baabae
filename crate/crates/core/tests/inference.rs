use causalkit::inference::*;
use causalkit::learners::{CvPlan, LearnerClass, LearnerGrid, Scoring};
use causalkit::meta::EstimatorTag;
use causalkit::synthetic::{generate, DgpKind, DgpSpec};
use causalkit::Dataset;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn noise_free_linear_data_scores_perfectly_out_of_sample() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Const, 400, 1).with_noise(0.0)).unwrap();
    let mut grid = LearnerGrid::new(LearnerClass::Ridge);
    grid.lambda_ratio = 1e-10;
    let report = nested_cv_evaluate(&ds, &[grid], &NestedCvConfig::new(1)).unwrap();
    for arm in [0, 1] {
        let s = report.get(LearnerClass::Ridge, arm).unwrap();
        assert_eq!(s.r2.len(), 10);
        assert!((s.r2_mean - 1.0).abs() < 1e-6, "arm {arm}: {}", s.r2_mean);
        assert!(s.r2_std >= 0.0 && s.neg_mse_std >= 0.0);
    }
}

#[test]
fn nested_cv_is_reproducible_and_rejects_bad_configs() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Nl, 300, 2)).unwrap();
    let grids = [
        LearnerGrid::new(LearnerClass::Lasso),
        LearnerGrid::new(LearnerClass::Ridge),
    ];
    let mut cfg = NestedCvConfig::new(9);
    cfg.outer = 3;
    let a = nested_cv_evaluate(&ds, &grids, &cfg).unwrap();
    let b = nested_cv_evaluate(&ds, &grids, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.scores.len(), 4);
    cfg.outer = 1;
    assert!(nested_cv_evaluate(&ds, &grids, &cfg).is_err());
    cfg.outer = 3;
    cfg.split = 1.0;
    assert!(nested_cv_evaluate(&ds, &grids, &cfg).is_err());
}

#[test]
fn bootstrap_identities_and_determinism() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Het, 300, 3)).unwrap();
    let est = EffectEstimator::t_learner(LearnerClass::Ridge);
    let mut cfg = BootstrapConfig::new(3);
    cfg.replicates = 40;
    let a = bootstrap_effect(&ds, &est, &cfg).unwrap();
    let b = bootstrap_effect(&ds, &est, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tag, EstimatorTag::TLearner);
    assert_eq!(a.cate_draws.len(), 40);
    let grand = a.ate_draws.iter().sum::<f64>() / 40.0;
    assert_eq!(a.grand_mean, grand);
    for (s, c) in a.cate_draws.iter().enumerate() {
        assert_eq!(c.len(), ds.n());
        assert_eq!(a.ate_draws[s], c.iter().sum::<f64>() / ds.n() as f64);
    }
    assert!(a.ci.low <= a.grand_mean && a.grand_mean <= a.ci.high);
    // 40 draws at 95%: ranks ⌈1⌉ = 1 and ⌈39⌉ = 39
    let mut sorted = a.ate_draws.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(a.ci.low, sorted[0]);
    assert_eq!(a.ci.high, sorted[38]);
}

#[test]
fn dr_bootstrap_runs_with_fixed_and_refit_propensity() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Conf, 400, 4)).unwrap();
    let mut cfg = BootstrapConfig::new(4);
    cfg.replicates = 10;
    let refit = EffectEstimator::dr(LearnerClass::Ridge, 0.01);
    let r = bootstrap_effect(&ds, &refit, &cfg).unwrap();
    let plan = CvPlan::stratified(ds.t(), 5, Scoring::LogLoss, 4).unwrap();
    let rho = causalkit::meta::fit_propensity(&ds, &[], &plan, 0.01).unwrap();
    let fixed = EffectEstimator::Dr {
        grid: LearnerGrid::new(LearnerClass::Ridge),
        epsilon: 0.01,
        fixed_propensity: Some(rho),
    };
    let f = bootstrap_effect(&ds, &fixed, &cfg).unwrap();
    assert_eq!(r.tag, EstimatorTag::Dr);
    assert_ne!(r.ate_draws, f.ate_draws);
    for v in r.ate_draws.iter().chain(&f.ate_draws) {
        assert!((v - 5.0).abs() < 1.5, "{v}");
    }
}

#[test]
fn reference_estimators_on_clean_and_confounded_data() {
    let (ds, truth) = generate(&DgpSpec::new(DgpKind::Const, 4000, 5)).unwrap();
    let r = reference_estimators(&ds).unwrap();
    // MC std of the difference in means: Var(y | arm) = 1.25 + 1 on DGP-CONST
    let sd = (2.25f64 / 2000.0 * 2.0).sqrt();
    assert!((r.difference_in_means - truth.ate).abs() < 3.0 * sd);
    assert!((r.ols_with_controls - truth.ate).abs() < 3.0 * sd);

    let spec = DgpSpec::new(DgpKind::Conf, 20_000, 6);
    let (ds, truth) = generate(&spec).unwrap();
    let r = reference_estimators(&ds).unwrap();
    let arm_sd = |arm: u8| {
        let v: Vec<f64> = ds.arm_indices(arm).iter().map(|&i| ds.y()[i]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 * v.len() as f64)
    };
    let sd = (arm_sd(0) + arm_sd(1)).sqrt();
    let excess = r.difference_in_means - truth.ate;
    assert!(
        (excess - spec.naive_bias()).abs() < 3.0 * sd,
        "{excess} vs {} ± {sd}",
        spec.naive_bias()
    );
    assert!((r.ols_with_controls - 5.0).abs() < 0.1);
}

#[test]
fn collinear_design_asks_for_pruning() {
    let n = 60;
    let x = DMatrix::from_fn(n, 2, |i, _| i as f64);
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let ds = Dataset::from_continuous(vec![1.0; n], t, x).unwrap();
    let err = reference_estimators(&ds).unwrap_err().to_string();
    assert!(err.contains("prune"), "{err}");
}

#[test]
fn percentile_ranks_follow_the_ceiling_rule() {
    let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    let ci = percentile_interval(&v, 0.95).unwrap();
    assert_eq!((ci.low, ci.high), (3.0, 98.0));
    let ci = percentile_interval(&v, 0.9).unwrap();
    assert_eq!((ci.low, ci.high), (5.0, 95.0));
    assert!(percentile_interval(&[], 0.95).is_err());
    assert!(percentile_interval(&v, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicated_rows_never_straddle_folds(
        origins in proptest::collection::vec(0usize..60, 60..200),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<u8> = origins.iter().map(|&o| (o % 2) as u8).collect();
        let distinct = {
            let mut u = origins.clone();
            u.sort_unstable();
            u.dedup();
            u.len()
        };
        prop_assume!(distinct >= 2 * k);
        let plan = CvPlan::grouped(&origins, &labels, k, Scoring::NegMse, seed).unwrap();
        for i in 0..origins.len() {
            for j in 0..origins.len() {
                if origins[i] == origins[j] {
                    prop_assert_eq!(plan.folds[i], plan.folds[j]);
                }
            }
        }
    }

    #[test]
    fn percentile_endpoints_are_order_statistics(
        v in proptest::collection::vec(-100.0f64..100.0, 2..300),
        level in 0.5f64..0.99,
    ) {
        let ci = percentile_interval(&v, level).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let s = v.len() as f64;
        let lo = ((s * (1.0 - level) / 2.0 - 1e-9).ceil() as usize).clamp(1, v.len());
        let hi = ((s * (1.0 + level) / 2.0 - 1e-9).ceil() as usize).clamp(1, v.len());
        prop_assert_eq!(ci.low, sorted[lo - 1]);
        prop_assert_eq!(ci.high, sorted[hi - 1]);
        prop_assert!(ci.low <= ci.high);
    }
}
