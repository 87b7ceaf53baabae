//! Supervised base learners and hyperparameter search.

pub mod cv;
pub mod gbr;
pub mod linear;
pub mod logistic;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use cv::{
    auc, cross_validate, log_loss, mse, r_squared, CvOutcome, CvPlan, Learner, Predictor, Scoring,
};
pub use gbr::{fit_gbr, BoostedTreeModel, GbrParams};
pub use linear::{fit_lasso, fit_ridge, lambda_grid, lambda_max, LinearModel, Penalty};
pub use logistic::{fit_logistic, LogisticModel};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

const LASSO_TOLERANCE: f64 = 1e-8;
const LASSO_MAX_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerClass {
    Lasso,
    Ridge,
    Gbr,
}

impl LearnerClass {
    pub const ALL: [LearnerClass; 3] =
        [LearnerClass::Lasso, LearnerClass::Ridge, LearnerClass::Gbr];
}

impl fmt::Display for LearnerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerClass::Lasso => "lasso",
            LearnerClass::Ridge => "ridge",
            LearnerClass::Gbr => "gbr",
        })
    }
}

impl FromStr for LearnerClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" => Ok(LearnerClass::Lasso),
            "ridge" => Ok(LearnerClass::Ridge),
            "gbr" => Ok(LearnerClass::Gbr),
            other => Err(Error::contract(format!("unknown learner class '{other}'"))),
        }
    }
}

/// One regression hyperparameter setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "lowercase")]
pub enum Hyper {
    Lasso { lambda: f64 },
    Ridge { lambda: f64 },
    Gbr(GbrParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitted {
    Linear(LinearModel),
    Boosted(BoostedTreeModel),
}

impl Predictor for Fitted {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match self {
            Fitted::Linear(m) => m.predict(x),
            Fitted::Boosted(m) => m.predict(x),
        }
    }
}

impl Fitted {
    pub fn n_features(&self) -> usize {
        match self {
            Fitted::Linear(m) => m.weights.len(),
            Fitted::Boosted(m) => m.n_features,
        }
    }
}

impl Learner for Hyper {
    type Model = Fitted;

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Fitted> {
        match self {
            Hyper::Lasso { lambda } => {
                fit_lasso(x, y, *lambda, LASSO_TOLERANCE, LASSO_MAX_ITERATIONS).map(Fitted::Linear)
            }
            Hyper::Ridge { lambda } => fit_ridge(x, y, *lambda).map(Fitted::Linear),
            Hyper::Gbr(p) => fit_gbr(x, y, p, seed).map(Fitted::Boosted),
        }
    }

    fn complexity(&self) -> Vec<f64> {
        match self {
            Hyper::Lasso { lambda } | Hyper::Ridge { lambda } => vec![-lambda],
            Hyper::Gbr(p) => vec![
                p.n_trees as f64,
                p.max_depth as f64,
                p.learning_rate,
                -(p.min_leaf as f64),
            ],
        }
    }
}

/// Regularized logistic regression with penalty `lambda`, scored on probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticSetting {
    pub lambda: f64,
}

impl Predictor for LogisticModel {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.predict_proba(x)
    }
}

impl Learner for LogisticSetting {
    type Model = LogisticModel;
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], _seed: u64) -> Result<LogisticModel> {
        fit_logistic(x, y, self.lambda)
    }
    fn complexity(&self) -> Vec<f64> {
        vec![-self.lambda]
    }
}

/// Hyperparameter search space for one learner class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerGrid {
    pub class: LearnerClass,
    /// Number of log-spaced penalties for LASSO/Ridge.
    pub lambda_points: usize,
    /// Smallest penalty as a fraction of `lambda_max`.
    pub lambda_ratio: f64,
    pub gbr: Vec<GbrParams>,
}

impl LearnerGrid {
    pub fn new(class: LearnerClass) -> Self {
        LearnerGrid {
            class,
            lambda_points: 20,
            lambda_ratio: 1e-4,
            gbr: GbrParams::default_grid(),
        }
    }

    pub fn with_gbr(mut self, gbr: Vec<GbrParams>) -> Self {
        self.gbr = gbr;
        self
    }

    /// Concrete settings for the data at hand; penalty grids scale with the
    /// data's `lambda_max`.
    pub fn candidates(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<Hyper>> {
        Ok(match self.class {
            LearnerClass::Lasso => {
                lambda_grid(lambda_max(x, y)?, self.lambda_points, self.lambda_ratio)
                    .into_iter()
                    .map(|lambda| Hyper::Lasso { lambda })
                    .collect()
            }
            LearnerClass::Ridge => {
                lambda_grid(lambda_max(x, y)?, self.lambda_points, self.lambda_ratio)
                    .into_iter()
                    .map(|lambda| Hyper::Ridge { lambda })
                    .collect()
            }
            LearnerClass::Gbr => self.gbr.iter().copied().map(Hyper::Gbr).collect(),
        })
    }
}

/// Select a setting by cross-validation and refit it on all rows.
pub fn tune_and_fit(
    grid: &LearnerGrid,
    plan: &CvPlan,
    x: &DMatrix<f64>,
    y: &[f64],
    seed: u64,
) -> Result<(Hyper, Fitted)> {
    let candidates = grid.candidates(x, y)?;
    let best = if candidates.len() == 1 {
        0
    } else {
        cross_validate_hypers(&candidates, plan, x, y, derive_seed(seed, "tune", 0))?.best_index
    };
    let setting = candidates[best].clone();
    let model = setting.fit(x, y, derive_seed(seed, "tune-refit", 0))?;
    Ok((setting, model))
}

/// Same outcome as [`cross_validate`]. Deterministic boosting settings that
/// differ only in tree count share one fit per fold, scored at each count.
pub fn cross_validate_hypers(
    grid: &[Hyper],
    plan: &CvPlan,
    x: &DMatrix<f64>,
    y: &[f64],
    seed: u64,
) -> Result<CvOutcome> {
    let mut params = Vec::with_capacity(grid.len());
    for h in grid {
        match h {
            Hyper::Gbr(p) if p.subsample >= 1.0 && p.n_trees > 0 => params.push(*p),
            _ => return cross_validate(grid, plan, x, y, seed),
        }
    }
    // group members by everything but the tree count
    let mut groups: Vec<(GbrParams, Vec<usize>)> = Vec::new();
    for (g, p) in params.iter().enumerate() {
        let same = |q: &GbrParams| {
            q.max_depth == p.max_depth
                && q.min_leaf == p.min_leaf
                && q.learning_rate.to_bits() == p.learning_rate.to_bits()
        };
        match groups.iter_mut().find(|(q, _)| same(q)) {
            Some((q, members)) => {
                q.n_trees = q.n_trees.max(p.n_trees);
                members.push(g);
            }
            None => groups.push((*p, vec![g])),
        }
    }
    let parts = cv::fold_parts(plan, x, y)?;
    let k = plan.k;
    let staged: Vec<Result<Vec<f64>>> = crate::par::map_indexed(groups.len() * k, |job| {
        let ((full, members), f) = (&groups[job / k], job % k);
        let (xtr, ytr, xte, yte) = &parts[f];
        let model = fit_gbr(xtr, ytr, full, seed)?;
        let mut sums = vec![0.0; xte.nrows()];
        let mut scores = vec![f64::NAN; members.len()];
        let mut done = 0;
        for stage in 0..=model.trees.len() {
            for (m, &g) in members.iter().enumerate() {
                if params[g].n_trees.min(model.trees.len()) == stage {
                    let pred: Vec<f64> = sums
                        .iter()
                        .map(|s| model.initial + full.learning_rate * s)
                        .collect();
                    scores[m] = plan.scoring.score(yte, &pred)?;
                    done += 1;
                }
            }
            if done == members.len() {
                break;
            }
            let tree = &model.trees[stage];
            for (i, s) in sums.iter_mut().enumerate() {
                *s += tree.predict_row(xte, i);
            }
        }
        Ok(scores)
    });
    let mut scores: Vec<Result<f64>> = (0..grid.len() * k).map(|_| Ok(f64::NAN)).collect();
    for (job, res) in staged.into_iter().enumerate() {
        let (members, f) = (&groups[job / k].1, job % k);
        match res {
            Ok(v) => {
                for (m, &g) in members.iter().enumerate() {
                    scores[g * k + f] = Ok(v[m]);
                }
            }
            Err(e) => {
                for &g in members {
                    scores[g * k + f] = Err(Error::numerical(e.to_string()));
                }
            }
        }
    }
    cv::summarize(grid, &scores, k)
}

/// Default logistic penalty grid: 10 log-spaced values in [1e-4, 1].
pub fn default_logistic_grid() -> Vec<LogisticSetting> {
    lambda_grid(1.0, 10, 1e-4)
        .into_iter()
        .map(|lambda| LogisticSetting { lambda })
        .collect()
}
