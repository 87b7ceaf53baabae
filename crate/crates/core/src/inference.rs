//! Model-class evaluation by nested cross-validation and effect uncertainty by
//! the bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{
    mse, r_squared, tune_and_fit, CvPlan, LearnerClass, LearnerGrid, Predictor, Scoring,
};
use crate::meta::{
    cate_doubly_robust, cate_t_learner, fit_propensity, fit_t_learner, EstimatorTag,
    PropensityModel, MIN_ARM_SIZE,
};
use crate::par;
use crate::rng::{derive_seed, derived_rng};

pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedCvConfig {
    pub outer: usize,
    pub split: f64,
    pub inner_k: usize,
    pub seed: u64,
}

impl NestedCvConfig {
    pub fn new(seed: u64) -> Self {
        NestedCvConfig {
            outer: 10,
            split: 0.8,
            inner_k: 5,
            seed,
        }
    }
}

/// Holdout scores of one model class on one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub class: LearnerClass,
    pub arm: u8,
    pub neg_mse: Vec<f64>,
    pub r2: Vec<f64>,
    pub neg_mse_mean: f64,
    pub neg_mse_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedCvReport {
    pub scores: Vec<ArmScores>,
    pub outer: usize,
    pub inner_k: usize,
    pub split: f64,
    /// Outer splits discarded because an arm was too small.
    pub redraws: usize,
}

impl NestedCvReport {
    pub fn get(&self, class: LearnerClass, arm: u8) -> Option<&ArmScores> {
        self.scores
            .iter()
            .find(|s| s.class == class && s.arm == arm)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Random train/holdout split whose training part leaves every arm with enough
/// rows for the inner folds and whose holdout has at least two rows per arm.
fn outer_split(
    ds: &Dataset,
    cfg: &NestedCvConfig,
    repeat: usize,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let n = ds.n();
    let n_train = ((n as f64) * cfg.split).round() as usize;
    let need = MIN_ARM_SIZE.max(cfg.inner_k);
    for attempt in 0..=MAX_REDRAWS {
        let mut rng = derived_rng(
            cfg.seed,
            "nested-outer",
            (repeat * (MAX_REDRAWS + 1) + attempt) as u64,
        );
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        let (train, test) = rows.split_at(n_train);
        let count = |rows: &[usize], arm: u8| rows.iter().filter(|&&i| ds.t()[i] == arm).count();
        if [0u8, 1]
            .iter()
            .all(|&a| count(train, a) >= need && count(test, a) >= 2)
        {
            let mut train = train.to_vec();
            let mut test = test.to_vec();
            train.sort_unstable();
            test.sort_unstable();
            return Ok((train, test, attempt));
        }
    }
    Err(Error::contract(format!(
        "nested CV: arm starvation in outer split {repeat} after {MAX_REDRAWS} redraws"
    )))
}

/// For each outer repeat: an 80/20 split, per-arm inner k-fold tuning on the
/// training part, refit on the training arm, and scoring on the holdout arm.
pub fn nested_cv_evaluate(
    ds: &Dataset,
    grids: &[LearnerGrid],
    cfg: &NestedCvConfig,
) -> Result<NestedCvReport> {
    if cfg.outer < 2 {
        return Err(Error::contract("nested CV needs at least 2 outer repeats"));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(Error::contract("split fraction must lie in (0, 1)"));
    }
    if grids.is_empty() {
        return Err(Error::contract("no model classes to evaluate"));
    }
    // results[repeat][grid][arm] = (neg_mse, r2)
    let results = par::map_indexed(cfg.outer, |r| -> Result<(Vec<[(f64, f64); 2]>, usize)> {
        let (train, test, redraws) = outer_split(ds, cfg, r)?;
        let tr = ds.select_rows(&train);
        let te = ds.select_rows(&test);
        let plan = CvPlan::stratified(
            tr.t(),
            cfg.inner_k,
            Scoring::NegMse,
            derive_seed(cfg.seed, "nested-inner", r as u64),
        )?;
        let mut per_grid = Vec::with_capacity(grids.len());
        for (g, grid) in grids.iter().enumerate() {
            let mut arms = [(0.0, 0.0); 2];
            for arm in [0u8, 1] {
                let rows = tr.arm_indices(arm);
                let arm_plan = plan.restrict(&rows)?;
                let x = tr.x().select_rows(&rows);
                let y: Vec<f64> = rows.iter().map(|&i| tr.y()[i]).collect();
                let seed = derive_seed(
                    cfg.seed,
                    "nested-fit",
                    (r * grids.len() + g) as u64 * 2 + arm as u64,
                );
                let (_, model) = tune_and_fit(grid, &arm_plan, &x, &y, seed)?;
                let hold = te.arm_indices(arm);
                let hx = te.x().select_rows(&hold);
                let hy: Vec<f64> = hold.iter().map(|&i| te.y()[i]).collect();
                let pred = model.predict(&hx);
                arms[arm as usize] = (-mse(&hy, &pred), r_squared(&hy, &pred));
            }
            per_grid.push(arms);
        }
        Ok((per_grid, redraws))
    });
    let mut collected = Vec::with_capacity(cfg.outer);
    let mut redraws = 0;
    for r in results {
        let (v, d) = r?;
        collected.push(v);
        redraws += d;
    }
    let mut scores = Vec::new();
    for (g, grid) in grids.iter().enumerate() {
        for arm in [0u8, 1] {
            let neg_mse: Vec<f64> = collected.iter().map(|c| c[g][arm as usize].0).collect();
            let r2: Vec<f64> = collected.iter().map(|c| c[g][arm as usize].1).collect();
            let (neg_mse_mean, neg_mse_std) = mean_std(&neg_mse);
            let (r2_mean, r2_std) = mean_std(&r2);
            scores.push(ArmScores {
                class: grid.class,
                arm,
                neg_mse,
                r2,
                neg_mse_mean,
                neg_mse_std,
                r2_mean,
                r2_std,
            });
        }
    }
    Ok(NestedCvReport {
        scores,
        outer: cfg.outer,
        inner_k: cfg.inner_k,
        split: cfg.split,
        redraws,
    })
}

/// An effect estimator that can be refitted on a bootstrap replicate.
pub trait ReplicateEstimator: Sync {
    fn tag(&self) -> EstimatorTag;

    /// Smallest arm size the estimator can be fitted on.
    fn min_arm(&self, k: usize) -> usize {
        MIN_ARM_SIZE.max(k)
    }

    /// Fit on `replicate` (tuning with `plan`) and return the CATE of every row
    /// of `original`.
    fn cate_on(
        &self,
        replicate: &Dataset,
        plan: &CvPlan,
        original: &Dataset,
        seed: u64,
    ) -> Result<Vec<f64>>;
}

/// T-learner or doubly-robust estimator over one model class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EffectEstimator {
    TLearner(LearnerGrid),
    Dr {
        grid: LearnerGrid,
        epsilon: f64,
        /// Use this propensity model in every replicate instead of refitting.
        fixed_propensity: Option<PropensityModel>,
    },
}

impl EffectEstimator {
    pub fn t_learner(class: LearnerClass) -> Self {
        EffectEstimator::TLearner(LearnerGrid::new(class))
    }

    pub fn dr(class: LearnerClass, epsilon: f64) -> Self {
        EffectEstimator::Dr {
            grid: LearnerGrid::new(class),
            epsilon,
            fixed_propensity: None,
        }
    }

    pub fn grid(&self) -> &LearnerGrid {
        match self {
            EffectEstimator::TLearner(g) => g,
            EffectEstimator::Dr { grid, .. } => grid,
        }
    }

    /// Point estimate on the full sample: CATE per unit.
    pub fn fit_cate(&self, ds: &Dataset, k: usize, seed: u64) -> Result<Vec<f64>> {
        let plan = CvPlan::stratified(
            ds.t(),
            k,
            Scoring::NegMse,
            derive_seed(seed, "point-plan", 0),
        )?;
        self.cate_on(ds, &plan, ds, seed)
    }
}

impl ReplicateEstimator for EffectEstimator {
    fn tag(&self) -> EstimatorTag {
        match self {
            EffectEstimator::TLearner(_) => EstimatorTag::TLearner,
            EffectEstimator::Dr { .. } => EstimatorTag::Dr,
        }
    }

    fn cate_on(
        &self,
        replicate: &Dataset,
        plan: &CvPlan,
        original: &Dataset,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let pair = fit_t_learner(
            replicate,
            self.grid(),
            plan,
            derive_seed(seed, "surfaces", 0),
        )?;
        match self {
            EffectEstimator::TLearner(_) => Ok(cate_t_learner(&pair, original)?.values),
            EffectEstimator::Dr {
                epsilon,
                fixed_propensity,
                ..
            } => {
                let rho = match fixed_propensity {
                    Some(r) => r.with_epsilon(*epsilon)?,
                    None => fit_propensity(replicate, &[], plan, *epsilon)?,
                };
                Ok(cate_doubly_robust(original, &pair, &rho)?.values)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub ci_level: f64,
    pub k: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        BootstrapConfig {
            replicates: 100,
            ci_level: 0.95,
            k: 5,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

/// Percentile interval: with S sorted values and α = 1 − level, the endpoints
/// are the order statistics of rank ⌈S·α/2⌉ and ⌈S·(1−α/2)⌉ (1-based), each
/// clamped to [1, S].
pub fn percentile_interval(values: &[f64], level: f64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::contract("percentile interval of an empty sample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::contract("interval level must lie in (0, 1)"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s = sorted.len() as f64;
    let alpha = 1.0 - level;
    let rank = |p: f64| -> usize {
        // Guard against 0.025·100 evaluating to 2.5000000000000004.
        let r = (s * p - 1e-9).ceil() as usize;
        r.clamp(1, sorted.len())
    };
    Ok(Interval {
        level,
        low: sorted[rank(alpha / 2.0) - 1],
        high: sorted[rank(1.0 - alpha / 2.0) - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub tag: EstimatorTag,
    /// Replicate ATEs, in replicate order.
    pub ate_draws: Vec<f64>,
    pub grand_mean: f64,
    /// `cate_draws[s][i]`: replicate s's effect for original unit i.
    pub cate_draws: Vec<Vec<f64>>,
    pub ci: Interval,
    /// Replicates that were redrawn because an arm was too small.
    pub redraws: usize,
}

/// Resample rows with replacement until both arms have `min_arm` rows.
fn draw_replicate(
    ds: &Dataset,
    seed: u64,
    s: usize,
    min_arm: usize,
) -> Result<(Vec<usize>, usize)> {
    let n = ds.n();
    for attempt in 0..=MAX_REDRAWS {
        let mut rng = derived_rng(
            seed,
            "bootstrap-rows",
            (s * (MAX_REDRAWS + 1) + attempt) as u64,
        );
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let treated = rows.iter().filter(|&&i| ds.t()[i] == 1).count();
        if treated >= min_arm && n - treated >= min_arm {
            return Ok((rows, attempt));
        }
    }
    Err(Error::contract(format!(
        "bootstrap replicate {s}: an arm stayed below {min_arm} rows after {MAX_REDRAWS} redraws"
    )))
}

/// Nonparametric bootstrap of a CATE estimator. Each replicate resamples n rows
/// with replacement, tunes by k-fold CV with folds assigned per original unit,
/// refits, and evaluates effects on the original rows.
pub fn bootstrap_effect<E: ReplicateEstimator>(
    ds: &Dataset,
    estimator: &E,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if cfg.replicates < 2 {
        return Err(Error::contract("bootstrap needs at least 2 replicates"));
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(Error::contract("CI level must lie in (0, 1)"));
    }
    ds.require_arms(1)?;
    let min_arm = estimator.min_arm(cfg.k);
    let results = par::map_indexed(cfg.replicates, |s| -> Result<(Vec<f64>, usize)> {
        let (rows, redraws) = draw_replicate(ds, cfg.seed, s, min_arm)?;
        let replicate = ds.select_rows(&rows);
        let plan = CvPlan::grouped(
            &rows,
            replicate.t(),
            cfg.k,
            Scoring::NegMse,
            derive_seed(cfg.seed, "bootstrap-folds", s as u64),
        )?;
        let cate = estimator.cate_on(
            &replicate,
            &plan,
            ds,
            derive_seed(cfg.seed, "bootstrap-fit", s as u64),
        )?;
        if cate.len() != ds.n() || cate.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "bootstrap replicate {s} produced invalid effects"
            )));
        }
        Ok((cate, redraws))
    });
    let mut cate_draws = Vec::with_capacity(cfg.replicates);
    let mut redraws = 0;
    for r in results {
        let (c, d) = r?;
        cate_draws.push(c);
        redraws += d;
    }
    let n = ds.n() as f64;
    let ate_draws: Vec<f64> = cate_draws
        .iter()
        .map(|c| c.iter().sum::<f64>() / n)
        .collect();
    let grand_mean = ate_draws.iter().sum::<f64>() / ate_draws.len() as f64;
    let ci = percentile_interval(&ate_draws, cfg.ci_level)?;
    Ok(BootstrapResult {
        tag: estimator.tag(),
        ate_draws,
        grand_mean,
        cate_draws,
        ci,
        redraws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEstimates {
    pub difference_in_means: f64,
    pub ols_with_controls: f64,
}

/// Difference in arm means, and the treatment coefficient of least squares on
/// `(1, t, x)`.
pub fn reference_estimators(ds: &Dataset) -> Result<ReferenceEstimates> {
    ds.require_arms(1)?;
    let arm_mean = |arm: u8| {
        let rows = ds.arm_indices(arm);
        rows.iter().map(|&i| ds.y()[i]).sum::<f64>() / rows.len() as f64
    };
    let difference_in_means = arm_mean(1) - arm_mean(0);
    let (n, d) = (ds.n(), ds.d());
    let z = DMatrix::from_fn(n, d + 2, |i, j| match j {
        0 => 1.0,
        1 => ds.t()[i] as f64,
        j => ds.x()[(i, j - 2)],
    });
    let ztz = z.tr_mul(&z);
    let zty = z.tr_mul(&DVector::from_column_slice(ds.y()));
    let chol = ztz.clone().cholesky().ok_or_else(|| {
        Error::numerical("OLS design (1, t, x) is singular; prune collinear or constant features")
    })?;
    let l = chol.l();
    let diag: Vec<f64> = (0..d + 2).map(|i| l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= max * 1e-7 {
        return Err(Error::numerical(
            "OLS design (1, t, x) is singular; prune collinear or constant features",
        ));
    }
    let beta = chol.solve(&zty);
    Ok(ReferenceEstimates {
        difference_in_means,
        ols_with_controls: beta[1],
    })
}
