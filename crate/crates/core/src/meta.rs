//! T-learner and doubly-robust (AIPW) effect estimation.
//!
//! The T-learner fits one outcome surface per arm and takes the difference of
//! their predictions. The doubly-robust learner augments each surface with
//! inverse-propensity-weighted residuals:
//!
//! ```text
//! φᵢ = [tᵢ(yᵢ − μ₁(xᵢ))/ρ(xᵢ) + μ₁(xᵢ)] − [(1−tᵢ)(yᵢ − μ₀(xᵢ))/(1−ρ(xᵢ)) + μ₀(xᵢ)]
//! ATE = mean(φ)
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{
    cross_validate, default_logistic_grid, fit_logistic, tune_and_fit, CvPlan, Fitted, Hyper,
    LearnerClass, LearnerGrid, LogisticModel, LogisticSetting, Predictor, Scoring,
};
use crate::par;
use crate::rng::derive_seed;

/// Hard floor on rows per arm for any fitted estimator.
pub const MIN_ARM_SIZE: usize = 20;

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "T-learner")]
    TLearner,
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "Bayes-HLM")]
    BayesHlm,
    #[serde(rename = "Bayes-GP")]
    BayesGp,
    #[serde(rename = "BCF")]
    Bcf,
}

/// Per-unit treatment effects τ(xᵢ) from one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateVector {
    pub tag: EstimatorTag,
    pub values: Vec<f64>,
}

impl CateVector {
    pub fn ate(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Arm-specific conditional mean models μ₀ and μ₁.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSurfacePair {
    pub mu0: Fitted,
    pub mu1: Fitted,
    pub class: LearnerClass,
    pub setting0: Hyper,
    pub setting1: Hyper,
}

impl OutcomeSurfacePair {
    pub fn n_features(&self) -> usize {
        self.mu0.n_features()
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if self.mu0.n_features() != ds.d() || self.mu1.n_features() != ds.d() {
            return Err(Error::contract(format!(
                "outcome surfaces expect {} features, dataset has {}",
                self.mu0.n_features(),
                ds.d()
            )));
        }
        Ok(())
    }

    pub fn predict_arms(&self, x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        (self.mu0.predict(x), self.mu1.predict(x))
    }
}

/// Fit μ₀ on control rows and μ₁ on treated rows, choosing hyperparameters
/// separately per arm by cross-validation over that arm's rows of `plan`.
pub fn fit_t_learner(
    ds: &Dataset,
    grid: &LearnerGrid,
    plan: &CvPlan,
    seed: u64,
) -> Result<OutcomeSurfacePair> {
    if plan.n() != ds.n() {
        return Err(Error::contract("fold plan does not cover the dataset"));
    }
    ds.require_arms(MIN_ARM_SIZE.max(plan.k))?;
    let fits = par::map_indexed(2, |arm| -> Result<(Hyper, Fitted)> {
        let rows = ds.arm_indices(arm as u8);
        let arm_plan = plan
            .restrict(&rows)
            .map_err(|e| Error::contract(format!("arm {arm}: {e}")))?
            .with_scoring(Scoring::NegMse);
        let x = ds.x().select_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&i| ds.y()[i]).collect();
        tune_and_fit(
            grid,
            &arm_plan,
            &x,
            &y,
            derive_seed(seed, "t-learner", arm as u64),
        )
    });
    let mut fits = fits.into_iter();
    let (setting0, mu0) = fits.next().expect("two arms")?;
    let (setting1, mu1) = fits.next().expect("two arms")?;
    Ok(OutcomeSurfacePair {
        mu0,
        mu1,
        class: grid.class,
        setting0,
        setting1,
    })
}

/// τ(xᵢ) = μ₁(xᵢ) − μ₀(xᵢ) for every unit.
pub fn cate_t_learner(pair: &OutcomeSurfacePair, ds: &Dataset) -> Result<CateVector> {
    pair.check(ds)?;
    let (m0, m1) = pair.predict_arms(ds.x());
    Ok(CateVector {
        tag: EstimatorTag::TLearner,
        values: m1.iter().zip(&m0).map(|(a, b)| a - b).collect(),
    })
}

/// Logistic propensity model with outputs clipped to `[ε, 1−ε]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub model: LogisticModel,
    pub epsilon: f64,
    /// Out-of-fold AUC from the selection run, when one was made.
    pub holdout_auc: Option<f64>,
}

impl PropensityModel {
    pub fn new(model: LogisticModel, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::contract(format!(
                "clipping epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        Ok(PropensityModel {
            model,
            epsilon,
            holdout_auc: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.model.weights.len()
    }

    pub fn predict_raw(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.model.predict_proba(x)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let e = self.epsilon;
        self.predict_raw(x)
            .into_iter()
            .map(|p| p.clamp(e, 1.0 - e))
            .collect()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut m = PropensityModel::new(self.model.clone(), epsilon)?;
        m.holdout_auc = self.holdout_auc;
        Ok(m)
    }
}

/// Choose the logistic penalty by cross-validated log-loss, report the
/// out-of-fold AUC of the chosen penalty and refit on all rows.
pub fn fit_propensity(
    ds: &Dataset,
    grid: &[LogisticSetting],
    plan: &CvPlan,
    epsilon: f64,
) -> Result<PropensityModel> {
    let grid: Vec<LogisticSetting> = if grid.is_empty() {
        default_logistic_grid()
    } else {
        grid.to_vec()
    };
    let labels: Vec<f64> = ds.t().iter().map(|&v| v as f64).collect();
    let plan = plan.with_scoring(Scoring::LogLoss);
    let best = cross_validate(&grid, &plan, ds.x(), &labels, 0)?.best_index;
    let setting = grid[best];

    let mut oof = vec![0.0; ds.n()];
    for f in 0..plan.k {
        let (train, test) = plan.split(f);
        let ytr: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let m = fit_logistic(&ds.x().select_rows(&train), &ytr, setting.lambda)?;
        for (&i, p) in test.iter().zip(m.predict_proba(&ds.x().select_rows(&test))) {
            oof[i] = p;
        }
    }
    let holdout_auc = crate::learners::auc(&oof, &labels)?;
    let model = fit_logistic(ds.x(), &labels, setting.lambda)?;
    let mut rho = PropensityModel::new(model, epsilon)?;
    rho.holdout_auc = Some(holdout_auc);
    Ok(rho)
}

/// Per-unit doubly-robust pseudo-outcomes from raw inputs.
pub fn dr_pseudo_outcomes(
    t: &[u8],
    y: &[f64],
    mu1: &[f64],
    mu0: &[f64],
    rho: &[f64],
) -> Result<Vec<f64>> {
    let n = t.len();
    if [y.len(), mu1.len(), mu0.len(), rho.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::contract("doubly-robust inputs differ in length"));
    }
    (0..n)
        .map(|i| {
            let p = rho[i];
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::numerical(format!(
                    "propensity {p} for unit {i} is outside (0, 1) after clipping"
                )));
            }
            let ti = t[i] as f64;
            let treated = ti * (y[i] - mu1[i]) / p + mu1[i];
            let control = (1.0 - ti) * (y[i] - mu0[i]) / (1.0 - p) + mu0[i];
            Ok(treated - control)
        })
        .collect()
}

/// Doubly-robust ATE and its per-unit terms.
pub fn ate_doubly_robust(
    ds: &Dataset,
    pair: &OutcomeSurfacePair,
    rho: &PropensityModel,
) -> Result<(f64, Vec<f64>)> {
    let phi = cate_doubly_robust(ds, pair, rho)?.values;
    let ate = phi.iter().sum::<f64>() / phi.len() as f64;
    Ok((ate, phi))
}

pub fn cate_doubly_robust(
    ds: &Dataset,
    pair: &OutcomeSurfacePair,
    rho: &PropensityModel,
) -> Result<CateVector> {
    pair.check(ds)?;
    if rho.n_features() != ds.d() {
        return Err(Error::contract(
            "propensity model and dataset disagree on features",
        ));
    }
    let (m0, m1) = pair.predict_arms(ds.x());
    let p = rho.predict(ds.x());
    Ok(CateVector {
        tag: EstimatorTag::Dr,
        values: dr_pseudo_outcomes(ds.t(), ds.y(), &m1, &m0, &p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LinearModel, Penalty};
    use crate::synthetic::{generate, DgpKind, DgpSpec};
    use approx::assert_abs_diff_eq;

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

    fn hand_pair(mu0: Fitted, mu1: Fitted) -> OutcomeSurfacePair {
        OutcomeSurfacePair {
            mu0,
            mu1,
            class: LearnerClass::Ridge,
            setting0: Hyper::Ridge { lambda: 0.0 },
            setting1: Hyper::Ridge { lambda: 0.0 },
        }
    }

    fn flat_propensity(d: usize) -> PropensityModel {
        PropensityModel::new(
            LogisticModel {
                intercept: 0.0,
                weights: vec![0.0; d],
                lambda: 0.0,
                gradient_norm: 0.0,
                iterations: 0,
            },
            DEFAULT_EPSILON,
        )
        .unwrap()
    }

    #[test]
    fn two_unit_hand_example() {
        // (t, y, μ₁, μ₀, ρ) = (1, 10, 8, 5, 0.5) and (0, 4, 7, 3, 0.5).
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let ds = Dataset::from_continuous(vec![10.0, 4.0], vec![1, 0], x).unwrap();
        let pair = hand_pair(linear(5.0, vec![-2.0]), linear(8.0, vec![-1.0]));
        let (ate, phi) = ate_doubly_robust(&ds, &pair, &flat_propensity(1)).unwrap();
        assert_abs_diff_eq!(ate, 4.5, epsilon = 1e-10);
        assert_abs_diff_eq!(phi[0], 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(phi[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_surfaces_difference() {
        let x = DMatrix::from_column_slice(1, 1, &[3.0]);
        let ds = Dataset::from_continuous(vec![0.0], vec![1], x).unwrap();
        let pair = hand_pair(linear(0.0, vec![1.0]), linear(0.0, vec![2.0]));
        let cate = cate_t_learner(&pair, &ds).unwrap();
        assert_eq!(cate.values, vec![3.0]);
        let same = hand_pair(linear(1.0, vec![2.0]), linear(1.0, vec![2.0]));
        assert!(cate_t_learner(&same, &ds)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residuals_reduce_dr_to_t_learner() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let pair = hand_pair(linear(1.0, vec![0.5, -1.0]), linear(4.0, vec![1.5, 0.0]));
        let (m0, m1) = pair.predict_arms(&x);
        let t: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let y: Vec<f64> = (0..30)
            .map(|i| if t[i] == 1 { m1[i] } else { m0[i] })
            .collect();
        let ds = Dataset::from_continuous(y, t, x).unwrap();
        let rho = PropensityModel::new(
            LogisticModel {
                intercept: 0.3,
                weights: vec![0.2, -0.4],
                lambda: 0.0,
                gradient_norm: 0.0,
                iterations: 0,
            },
            0.05,
        )
        .unwrap();
        let dr = cate_doubly_robust(&ds, &pair, &rho).unwrap();
        let tl = cate_t_learner(&pair, &ds).unwrap();
        assert_eq!(dr.values, tl.values);
        assert_eq!(dr.ate(), tl.ate());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let x = DMatrix::from_element(3, 2, 1.0);
        let ds = Dataset::from_continuous(vec![0.0; 3], vec![0, 1, 0], x).unwrap();
        let pair = hand_pair(linear(0.0, vec![1.0]), linear(0.0, vec![1.0]));
        assert!(cate_t_learner(&pair, &ds).is_err());
    }

    #[test]
    fn unclipped_boundary_propensity_is_an_invariant_violation() {
        let err = dr_pseudo_outcomes(&[1], &[1.0], &[0.0], &[0.0], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn clipped_outputs_stay_in_bounds() {
        let rho = PropensityModel::new(
            LogisticModel {
                intercept: 0.0,
                weights: vec![50.0],
                lambda: 0.0,
                gradient_norm: 0.0,
                iterations: 0,
            },
            0.02,
        )
        .unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        for p in rho.predict(&x) {
            assert!((0.02..=0.98).contains(&p));
        }
        assert!(PropensityModel::new(rho.model.clone(), 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn dr_shift_invariance(
            rows in proptest::collection::vec((0u8..2, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, 0.05f64..0.95), 1..30),
            c in -100.0f64..100.0,
        ) {
            let t: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let m1: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let m0: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let p: Vec<f64> = rows.iter().map(|r| r.4).collect();
            let base = dr_pseudo_outcomes(&t, &y, &m1, &m0, &p).unwrap();
            let shift = |v: &[f64]| v.iter().map(|a| a + c).collect::<Vec<_>>();
            let moved = dr_pseudo_outcomes(&t, &shift(&y), &shift(&m1), &shift(&m0), &p).unwrap();
            let a: f64 = base.iter().sum::<f64>() / base.len() as f64;
            let b: f64 = moved.iter().sum::<f64>() / moved.len() as f64;
            proptest::prop_assert!((a - b).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn linear_t_learner_recovers_unit_effect() {
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin() * 2.0);
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + t[i] as f64).collect();
        let ds = Dataset::from_continuous(y, t.clone(), x).unwrap();
        let plan = CvPlan::stratified(&t, 5, Scoring::NegMse, 1).unwrap();
        let pair = fit_t_learner(&ds, &LearnerGrid::new(LearnerClass::Ridge), &plan, 3).unwrap();
        let probe = DMatrix::from_column_slice(5, 1, &[-3.0, -1.0, 0.0, 2.0, 4.0]);
        let (m0, m1) = pair.predict_arms(&probe);
        for (a, b) in m1.iter().zip(&m0) {
            assert_abs_diff_eq!(a - b, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn empty_arm_rejected() {
        let x = DMatrix::from_element(40, 1, 1.0);
        let ds = Dataset::from_continuous(vec![0.0; 40], vec![0; 40], x).unwrap();
        let plan = CvPlan::random(40, 5, Scoring::NegMse, 0).unwrap();
        assert!(fit_t_learner(&ds, &LearnerGrid::new(LearnerClass::Lasso), &plan, 0).is_err());
    }

    #[test]
    fn randomized_treatment_has_no_propensity_signal() {
        let (ds, _) = generate(&DgpSpec::new(DgpKind::Const, 2000, 17)).unwrap();
        let plan = CvPlan::stratified(ds.t(), 5, Scoring::LogLoss, 2).unwrap();
        let rho = fit_propensity(&ds, &[], &plan, DEFAULT_EPSILON).unwrap();
        let auc = rho.holdout_auc.unwrap();
        assert!((0.4..=0.6).contains(&auc), "auc {auc}");
    }

    #[test]
    fn confounded_treatment_is_predictable() {
        let (ds, _) = generate(&DgpSpec::new(DgpKind::Conf, 2000, 18)).unwrap();
        let plan = CvPlan::stratified(ds.t(), 5, Scoring::LogLoss, 2).unwrap();
        let rho = fit_propensity(&ds, &[], &plan, DEFAULT_EPSILON).unwrap();
        assert!(rho.holdout_auc.unwrap() > 0.65);
    }
}
