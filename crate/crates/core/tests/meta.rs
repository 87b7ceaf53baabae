use causalkit::learners::{
    CvPlan, Fitted, Hyper, LearnerClass, LearnerGrid, LinearModel, LogisticModel, Penalty, Scoring,
};
use causalkit::meta::*;
use causalkit::synthetic::{generate, DgpKind, DgpSpec};
use causalkit::Dataset;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn linear(intercept: f64, weights: Vec<f64>) -> Fitted {
    Fitted::Linear(LinearModel {
        intercept,
        weights,
        penalty: Penalty::L2,
        lambda: 0.0,
        converged: true,
        iterations: 0,
    })
}

fn pair(mu0: Fitted, mu1: Fitted) -> OutcomeSurfacePair {
    OutcomeSurfacePair {
        mu0,
        mu1,
        class: LearnerClass::Ridge,
        setting0: Hyper::Ridge { lambda: 0.0 },
        setting1: Hyper::Ridge { lambda: 0.0 },
    }
}

fn propensity(intercept: f64, weights: Vec<f64>) -> PropensityModel {
    PropensityModel::new(
        LogisticModel {
            intercept,
            weights,
            lambda: 0.0,
            gradient_norm: 0.0,
            iterations: 0,
        },
        DEFAULT_EPSILON,
    )
    .unwrap()
}

#[test]
fn worked_two_unit_example() {
    let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let ds = Dataset::from_continuous(vec![10.0, 4.0], vec![1, 0], x).unwrap();
    let p = pair(linear(5.0, vec![-2.0]), linear(8.0, vec![-1.0]));
    let (ate, _) = ate_doubly_robust(&ds, &p, &propensity(0.0, vec![0.0])).unwrap();
    assert!((ate - 4.5).abs() < 1e-10);
}

// DGP-CONF: μ₀ = 3x₁ + x₂, τ = 5, ρ = logistic(x₁).
fn conf(n: usize, seed: u64) -> Dataset {
    generate(&DgpSpec::new(DgpKind::Conf, n, seed).with_d(2))
        .unwrap()
        .0
}

#[test]
fn correct_surfaces_with_wrong_propensity_stay_consistent() {
    let ds = conf(200_000, 1);
    let p = pair(linear(0.0, vec![3.0, 1.0]), linear(5.0, vec![3.0, 1.0]));
    let (ate, phi) = ate_doubly_robust(&ds, &p, &propensity(0.0, vec![0.0, 0.0])).unwrap();
    let sd = sd_of(&phi) / (ds.n() as f64).sqrt();
    assert!((ate - 5.0).abs() < 4.0 * sd, "{ate} ± {sd}");
}

#[test]
fn correct_propensity_with_wrong_surfaces_stays_consistent() {
    let ds = conf(200_000, 2);
    let p = pair(linear(0.0, vec![0.0, 0.0]), linear(0.0, vec![0.0, 0.0]));
    let (ate, phi) = ate_doubly_robust(&ds, &p, &propensity(0.0, vec![1.0, 0.0])).unwrap();
    let sd = sd_of(&phi) / (ds.n() as f64).sqrt();
    assert!((ate - 5.0).abs() < 4.0 * sd, "{ate} ± {sd}");
}

fn sd_of(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn dr_corrects_confounding_that_biases_the_naive_contrast() {
    let ds = conf(5000, 3);
    let plan = CvPlan::stratified(ds.t(), 5, Scoring::NegMse, 3).unwrap();
    let surfaces = fit_t_learner(&ds, &LearnerGrid::new(LearnerClass::Ridge), &plan, 3).unwrap();
    let rho = fit_propensity(&ds, &[], &plan, DEFAULT_EPSILON).unwrap();
    let (dr, _) = ate_doubly_robust(&ds, &surfaces, &rho).unwrap();
    let naive = causalkit::inference::reference_estimators(&ds)
        .unwrap()
        .difference_in_means;
    assert!((naive - 5.0).abs() > 2.0);
    assert!(
        (dr - 5.0).abs() < 0.2 * (naive - 5.0).abs(),
        "dr {dr} naive {naive}"
    );
    assert!(rho.holdout_auc.unwrap() > 0.6);
}

#[test]
fn t_learner_recovers_constant_effect() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Const, 2000, 4)).unwrap();
    let plan = CvPlan::stratified(ds.t(), 5, Scoring::NegMse, 4).unwrap();
    for class in [LearnerClass::Lasso, LearnerClass::Ridge] {
        let surfaces = fit_t_learner(&ds, &LearnerGrid::new(class), &plan, 4).unwrap();
        let ate = cate_t_learner(&surfaces, &ds).unwrap().ate();
        assert!((ate - 5.0).abs() < 0.2, "{class}: {ate}");
    }
}

#[test]
fn thin_arm_is_rejected() {
    let (ds, _) = generate(&DgpSpec::new(DgpKind::Const, 200, 5)).unwrap();
    let rows: Vec<usize> = ds
        .arm_indices(0)
        .into_iter()
        .chain(ds.arm_indices(1).into_iter().take(MIN_ARM_SIZE - 1))
        .collect();
    let thin = ds.select_rows(&rows);
    let plan = CvPlan::random(thin.n(), 5, Scoring::NegMse, 5).unwrap();
    assert!(fit_t_learner(&thin, &LearnerGrid::new(LearnerClass::Ridge), &plan, 5).is_err());
}

#[test]
fn shrinking_clip_bound_changes_the_ate_continuously() {
    let ds = generate(
        &DgpSpec::new(DgpKind::Conf, 2000, 6)
            .with_selection(4.0)
            .with_d(2),
    )
    .unwrap()
    .0;
    let p = pair(linear(0.0, vec![2.0, 1.0]), linear(5.0, vec![2.5, 1.0]));
    let raw = propensity(0.0, vec![4.0, 0.0]);
    let ate_at = |eps: f64| {
        ate_doubly_robust(&ds, &p, &raw.with_epsilon(eps).unwrap())
            .unwrap()
            .0
    };
    let fine = (ate_at(1e-3) - ate_at(1e-3 + 1e-12)).abs();
    assert!(fine < 1e-6, "{fine}");
    // below the smallest raw propensity clipping is inactive
    let floor = raw
        .predict_raw(ds.x())
        .iter()
        .map(|&q| q.min(1.0 - q))
        .fold(f64::INFINITY, f64::min);
    let unclipped = ate_at(floor * 0.5);
    assert_eq!(unclipped, ate_at(floor * 0.1));
    assert!((ate_at(1e-3) - unclipped).abs() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_propensities_stay_in_bounds(
        b0 in -50.0f64..50.0, b1 in -50.0f64..50.0, eps in 1e-4f64..0.49,
        xs in proptest::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let rho = propensity(b0, vec![b1]).with_epsilon(eps).unwrap();
        let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
        for p in rho.predict(&x) {
            prop_assert!(p >= eps && p <= 1.0 - eps);
        }
    }

    #[test]
    fn dr_equals_t_learner_when_residuals_vanish(
        a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
        xs in proptest::collection::vec(-2.0f64..2.0, 4..30),
        p in 0.05f64..0.95,
    ) {
        // outcomes exactly on the surfaces leave only the T-learner term
        let n = xs.len();
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| if t[i] == 1 { a + c + b * xs[i] } else { a + b * xs[i] })
            .collect();
        let ds = Dataset::from_continuous(y, t, DMatrix::from_column_slice(n, 1, &xs)).unwrap();
        let surfaces = pair(linear(a, vec![b]), linear(a + c, vec![b]));
        let logit = (p / (1.0 - p)).ln();
        let (ate, _) = ate_doubly_robust(&ds, &surfaces, &propensity(logit, vec![0.0])).unwrap();
        prop_assert!((ate - c).abs() < 1e-9);
    }
}
