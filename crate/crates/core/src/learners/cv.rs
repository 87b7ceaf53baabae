//! Fold plans, scoring rules and grid-search cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, rng_from};

/// Scores are oriented so that larger is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scoring {
    NegMse,
    R2,
    /// Negated mean log-loss.
    LogLoss,
    Auc,
}

impl Scoring {
    pub fn is_classification(self) -> bool {
        matches!(self, Scoring::LogLoss | Scoring::Auc)
    }

    pub fn score(self, truth: &[f64], pred: &[f64]) -> Result<f64> {
        match self {
            Scoring::NegMse => Ok(-mse(truth, pred)),
            Scoring::R2 => Ok(r_squared(truth, pred)),
            Scoring::LogLoss => Ok(-log_loss(truth, pred)),
            Scoring::Auc => auc(pred, truth),
        }
    }
}

pub fn mse(truth: &[f64], pred: &[f64]) -> f64 {
    truth
        .iter()
        .zip(pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.len() as f64
}

/// `1 − SSE/SST`; `SST = 0` gives 1 for a perfect fit and 0 otherwise.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let m = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|v| (v - m) * (v - m)).sum();
    let sse: f64 = truth.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

pub fn log_loss(truth: &[f64], prob: &[f64]) -> f64 {
    truth
        .iter()
        .zip(prob)
        .map(|(&y, &p)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / truth.len() as f64
}

/// Area under the ROC curve as the Mann-Whitney statistic:
/// P(score of a random positive > score of a random negative) + ½P(tie).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.iter().filter(|&&l| l == 0.0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::contract("labels must be 0 or 1"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            end += 1;
        }
        let mid_rank = (k + 1 + end) as f64 / 2.0;
        for &i in &idx[k..end] {
            if labels[i] == 1.0 {
                rank_sum += mid_rank;
            }
        }
        k = end;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Assignment of rows to `k` folds plus the scoring rule used to compare settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    pub folds: Vec<usize>,
    pub scoring: Scoring,
}

fn round_robin(items: &mut [usize], k: usize, folds: &mut [usize], rng: &mut crate::rng::Rng) {
    items.shuffle(rng);
    for (pos, &i) in items.iter().enumerate() {
        folds[i] = pos % k;
    }
}

impl CvPlan {
    pub fn new(k: usize, folds: Vec<usize>, scoring: Scoring) -> Result<Self> {
        let plan = CvPlan { k, folds, scoring };
        plan.validate()?;
        Ok(plan)
    }

    /// Shuffled balanced assignment of `n` rows.
    pub fn random(n: usize, k: usize, scoring: Scoring, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut folds = vec![0; n];
        let mut items: Vec<usize> = (0..n).collect();
        round_robin(&mut items, k, &mut folds, &mut rng);
        CvPlan::new(k, folds, scoring)
    }

    /// Balanced assignment within each label class, so that every fold sees both
    /// classes whenever each class has at least `k` rows.
    pub fn stratified(labels: &[u8], k: usize, scoring: Scoring, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut folds = vec![0; labels.len()];
        for class in [0u8, 1] {
            let mut items: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            round_robin(&mut items, k, &mut folds, &mut rng);
        }
        CvPlan::new(k, folds, scoring)
    }

    /// Fold assignment for a bootstrap replicate: folds are drawn for the
    /// distinct original units (stratified by label) and every copy of a unit
    /// inherits its origin's fold, so duplicates never straddle train and
    /// validation.
    pub fn grouped(
        origins: &[usize],
        labels: &[u8],
        k: usize,
        scoring: Scoring,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut units: Vec<(usize, u8)> = origins
            .iter()
            .copied()
            .zip(labels.iter().copied())
            .collect();
        units.sort_unstable();
        units.dedup_by_key(|u| u.0);
        let max_origin = units.last().map(|u| u.0 + 1).unwrap_or(0);
        let mut unit_fold = vec![0usize; max_origin];
        for class in [0u8, 1] {
            let mut items: Vec<usize> =
                units.iter().filter(|u| u.1 == class).map(|u| u.0).collect();
            round_robin(&mut items, k, &mut unit_fold, &mut rng);
        }
        let folds = origins.iter().map(|&o| unit_fold[o]).collect();
        CvPlan::new(k, folds, scoring)
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::contract("cross-validation needs k >= 2"));
        }
        let mut sizes = vec![0usize; self.k];
        for &f in &self.folds {
            if f >= self.k {
                return Err(Error::contract(format!("fold index {f} out of range")));
            }
            sizes[f] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::contract(format!(
                "fold construction: fold {empty} is empty ({} rows, k={})",
                self.folds.len(),
                self.k
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.folds.len()
    }

    /// Plan over a subset of rows, keeping each row's fold. Errors when a fold
    /// ends up empty.
    pub fn restrict(&self, rows: &[usize]) -> Result<Self> {
        CvPlan::new(
            self.k,
            rows.iter().map(|&i| self.folds[i]).collect(),
            self.scoring,
        )
    }

    pub fn with_scoring(&self, scoring: Scoring) -> Self {
        CvPlan {
            scoring,
            ..self.clone()
        }
    }

    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &f) in self.folds.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

pub trait Predictor {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64>;
}

/// A hyperparameter setting that can be fitted.
pub trait Learner: Sync {
    type Model: Predictor;
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Self::Model>;
    /// Lexicographic complexity key; smaller means simpler. Used to break ties.
    fn complexity(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvOutcome {
    pub best_index: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub(crate) type FoldPart = (DMatrix<f64>, Vec<f64>, DMatrix<f64>, Vec<f64>);

/// Training and validation matrices for every fold of `plan`.
pub(crate) fn fold_parts(plan: &CvPlan, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<FoldPart>> {
    if plan.n() != x.nrows() || y.len() != x.nrows() {
        return Err(Error::contract("fold plan does not match the data"));
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..plan.k).map(|f| plan.split(f)).collect();
    if plan.scoring.is_classification() {
        for (f, (train, test)) in splits.iter().enumerate() {
            for (part, rows) in [("training", train), ("validation", test)] {
                let pos = rows.iter().filter(|&&i| y[i] == 1.0).count();
                if pos == 0 || pos == rows.len() {
                    return Err(Error::contract(format!(
                        "fold construction: {part} part of fold {f} is missing a class"
                    )));
                }
            }
        }
    }
    let parts: Vec<FoldPart> = splits
        .iter()
        .map(|(train, test)| {
            (
                x.select_rows(train),
                train.iter().map(|&i| y[i]).collect(),
                x.select_rows(test),
                test.iter().map(|&i| y[i]).collect(),
            )
        })
        .collect();
    Ok(parts)
}

/// Score every setting of `grid` on every fold of `plan`; pick the largest mean.
///
/// Mean scores equal to within `1e-12·(1+|s|)` are ties, resolved by the
/// simpler setting and then by grid order.
pub fn cross_validate<L: Learner>(
    grid: &[L],
    plan: &CvPlan,
    x: &DMatrix<f64>,
    y: &[f64],
    seed: u64,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::contract("hyperparameter grid is empty"));
    }
    let parts = fold_parts(plan, x, y)?;
    let k = plan.k;
    let scores: Vec<Result<f64>> = par::map_indexed(grid.len() * k, |job| {
        let (g, f) = (job / k, job % k);
        let (xtr, ytr, xte, yte) = &parts[f];
        let model = grid[g].fit(xtr, ytr, derive_seed(seed, "cv-fit", job as u64))?;
        plan.scoring.score(yte, &model.predict(xte))
    });
    summarize(grid, &scores, k)
}

/// Reduce fold scores laid out as `scores[g * k + f]` to a CV outcome.
pub(crate) fn summarize<L: Learner>(
    grid: &[L],
    scores: &[Result<f64>],
    k: usize,
) -> Result<CvOutcome> {
    let mut mean = Vec::with_capacity(grid.len());
    let mut std = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        let s: Vec<f64> = scores[g * k..(g + 1) * k]
            .iter()
            .map(|r| match r {
                Ok(v) => Ok(*v),
                Err(e) => Err(Error::numerical(format!("setting {g}: {e}"))),
            })
            .collect::<Result<_>>()?;
        let m = s.iter().sum::<f64>() / k as f64;
        let v = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1) as f64;
        mean.push(m);
        std.push(v.sqrt());
    }
    let mut best = 0;
    for g in 1..grid.len() {
        let (a, b) = (mean[g], mean[best]);
        let tie = (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        if tie {
            if lexi_less(&grid[g].complexity(), &grid[best].complexity()) {
                best = g;
            }
        } else if a > b {
            best = g;
        }
    }
    Ok(CvOutcome {
        best_index: best,
        mean,
        std,
    })
}

fn lexi_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            0.75
        );
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest::proptest! {
        #[test]
        fn auc_equals_pair_count(
            raw in proptest::collection::vec((0u8..6, proptest::bool::ANY), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let labels: Vec<f64> = raw.iter().map(|r| if r.1 { 1.0 } else { 0.0 }).collect();
            let pos = labels.iter().filter(|&&l| l == 1.0).count();
            proptest::prop_assume!(pos > 0 && pos < labels.len());
            let a = auc(&scores, &labels).unwrap();
            proptest::prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn plans_partition_rows() {
        let p = CvPlan::random(23, 5, Scoring::NegMse, 4).unwrap();
        let mut sizes = [0; 5];
        for &f in &p.folds {
            sizes[f] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 4 || s == 5));
        let labels: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let s = CvPlan::stratified(&labels, 5, Scoring::Auc, 1).unwrap();
        for f in 0..5 {
            let (_, test) = s.split(f);
            assert!(test.iter().any(|&i| labels[i] == 1));
            assert!(test.iter().any(|&i| labels[i] == 0));
        }
    }

    #[test]
    fn grouped_plan_keeps_copies_together() {
        let origins = [3, 3, 0, 7, 7, 7, 1, 2, 5, 0, 4, 6, 8, 9];
        let labels: Vec<u8> = origins.iter().map(|&o| (o % 2) as u8).collect();
        let p = CvPlan::grouped(&origins, &labels, 2, Scoring::NegMse, 3).unwrap();
        for a in 0..origins.len() {
            for b in 0..origins.len() {
                if origins[a] == origins[b] {
                    assert_eq!(p.folds[a], p.folds[b]);
                }
            }
        }
    }

    #[test]
    fn restrict_detects_starved_fold() {
        let p = CvPlan::new(2, vec![0, 1, 0, 1], Scoring::NegMse).unwrap();
        assert!(p.restrict(&[0, 1]).is_ok());
        assert!(p.restrict(&[0, 2]).is_err());
    }

    struct Constant(f64);
    struct ConstantModel(f64);
    impl Predictor for ConstantModel {
        fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
            vec![self.0; x.nrows()]
        }
    }
    impl Learner for Constant {
        type Model = ConstantModel;
        fn fit(&self, _: &DMatrix<f64>, _: &[f64], _: u64) -> Result<ConstantModel> {
            Ok(ConstantModel(self.0))
        }
        fn complexity(&self) -> Vec<f64> {
            vec![self.0.abs()]
        }
    }

    #[test]
    fn single_setting_is_selected() {
        let x = DMatrix::from_element(10, 1, 0.0);
        let y = vec![1.0; 10];
        let plan = CvPlan::random(10, 5, Scoring::NegMse, 0).unwrap();
        let out = cross_validate(&[Constant(0.3)], &plan, &x, &y, 0).unwrap();
        assert_eq!(out.best_index, 0);
        assert_abs_diff_eq!(out.mean[0], -0.49, epsilon = 1e-12);
    }

    #[test]
    fn ties_go_to_the_simpler_setting() {
        let x = DMatrix::from_element(10, 1, 0.0);
        let y = vec![0.0; 10];
        let plan = CvPlan::random(10, 2, Scoring::NegMse, 0).unwrap();
        let out = cross_validate(
            &[Constant(-1.0), Constant(1.0), Constant(0.5)],
            &plan,
            &x,
            &y,
            0,
        )
        .unwrap();
        // -1 and 1 tie with MSE 1; 0.5 is strictly best.
        assert_eq!(out.best_index, 2);
        let out = cross_validate(&[Constant(-1.0), Constant(1.0)], &plan, &x, &y, 0).unwrap();
        assert_eq!(out.best_index, 0);
    }

    #[test]
    fn classifier_folds_need_both_classes() {
        let x = DMatrix::from_element(6, 1, 0.0);
        let y = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let plan = CvPlan::new(2, vec![0, 0, 0, 1, 1, 1], Scoring::Auc).unwrap();
        let err = cross_validate(&[Constant(0.5)], &plan, &x, &y, 0).unwrap_err();
        assert!(err.to_string().contains("fold construction"));
    }
}
