//! Effect-modifier discovery: permutation importance on a boosted-tree
//! surrogate of the CATE, and median-split subgroup contrasts.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::inference::{percentile_interval, BootstrapResult, Interval};
use crate::learners::{
    mse, tune_and_fit, BoostedTreeModel, CvPlan, Fitted, GbrParams, Hyper, LearnerClass,
    LearnerGrid, Scoring,
};
use crate::par;
use crate::rng::{derive_seed, derived_rng};

/// Groups smaller than this get a warning.
pub const SMALL_GROUP: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSurrogate {
    pub model: BoostedTreeModel,
    pub setting: GbrParams,
    /// The fitted surrogate predicts a single value everywhere.
    pub constant: bool,
}

/// Boosted-tree regression of `cate` on `x`, tuned by cross-validation.
pub fn fit_cate_surrogate(
    x: &DMatrix<f64>,
    cate: &[f64],
    plan: &CvPlan,
    grid: &[GbrParams],
    seed: u64,
) -> Result<CateSurrogate> {
    if cate.len() != x.nrows() {
        return Err(Error::contract(
            "CATE length does not match the feature rows",
        ));
    }
    if cate.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("CATE contains non-finite values"));
    }
    let grid = if grid.is_empty() {
        GbrParams::default_grid()
    } else {
        grid.to_vec()
    };
    let learners = LearnerGrid::new(LearnerClass::Gbr).with_gbr(grid);
    let (setting, fitted) = tune_and_fit(
        &learners,
        &plan.with_scoring(Scoring::NegMse),
        x,
        cate,
        seed,
    )?;
    let (Hyper::Gbr(setting), Fitted::Boosted(model)) = (setting, fitted) else {
        unreachable!("GBR grid yields GBR models")
    };
    let constant = model.is_constant();
    if constant {
        log::warn!("CATE surrogate is constant; all importances will be zero");
    }
    Ok(CateSurrogate {
        model,
        setting,
        constant,
    })
}

/// MSE against `cate` after reordering column `feature` by `perm`, minus the
/// unpermuted MSE.
pub fn importance_for_permutation(
    model: &BoostedTreeModel,
    x: &DMatrix<f64>,
    cate: &[f64],
    feature: usize,
    perm: &[usize],
) -> f64 {
    let baseline = mse(cate, &model.predict(x));
    let mut xp = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        xp[(i, feature)] = x[(p, feature)];
    }
    mse(cate, &model.predict(&xp)) - baseline
}

/// Permutation importance of every feature, averaged over `repeats` seeded
/// permutations. Features the surrogate never splits on score exactly 0.
pub fn permutation_importance(
    model: &BoostedTreeModel,
    x: &DMatrix<f64>,
    cate: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if cate.len() != x.nrows() || model.n_features != x.ncols() {
        return Err(Error::contract(
            "surrogate, features and CATE disagree in shape",
        ));
    }
    let repeats = repeats.max(1);
    let used = model.used_features();
    let baseline = mse(cate, &model.predict(x));
    let n = x.nrows();
    Ok(par::map_indexed(x.ncols(), |j| {
        if !used[j] {
            return 0.0;
        }
        let mut total = 0.0;
        for r in 0..repeats {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut derived_rng(
                seed,
                "permutation",
                (j * repeats + r) as u64,
            ));
            let mut xp = x.clone();
            for (i, &p) in perm.iter().enumerate() {
                xp[(i, j)] = x[(p, j)];
            }
            total += mse(cate, &model.predict(&xp)) - baseline;
        }
        total / repeats as f64
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean: f64,
    pub std: f64,
    /// 1 = most important.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceShare {
    pub feature: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// In feature order.
    pub features: Vec<FeatureImportance>,
    pub replicates: usize,
    /// `per_replicate[s][j]`.
    pub per_replicate: Vec<Vec<f64>>,
    /// Up to ten largest shares of the total positive mean importance.
    pub top: Vec<ImportanceShare>,
    /// Share of everything outside `top`.
    pub residual_share: f64,
}

impl ImportanceReport {
    pub fn ranked(&self) -> Vec<&FeatureImportance> {
        let mut v: Vec<&FeatureImportance> = self.features.iter().collect();
        v.sort_by_key(|f| f.rank);
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,mean,std,rank\n");
        for f in &self.features {
            out.push_str(&format!("{},{},{},{}\n", f.feature, f.mean, f.std, f.rank));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub surrogate_grid: Vec<GbrParams>,
    pub k: usize,
    pub repeats: usize,
    /// Use at most this many bootstrap replicates.
    pub max_replicates: Option<usize>,
    pub seed: u64,
}

impl ImportanceConfig {
    pub fn new(seed: u64) -> Self {
        ImportanceConfig {
            surrogate_grid: GbrParams::default_grid(),
            k: 5,
            repeats: 1,
            max_replicates: None,
            seed,
        }
    }
}

fn summarize(names: &[String], per_replicate: Vec<Vec<f64>>) -> ImportanceReport {
    let d = names.len();
    let s = per_replicate.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| per_replicate.iter().map(|r| r[j]).sum::<f64>() / s as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            if s < 2 {
                return 0.0;
            }
            let v = per_replicate
                .iter()
                .map(|r| (r[j] - mean[j]).powi(2))
                .sum::<f64>()
                / (s - 1) as f64;
            v.sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let mut rank = vec![0; d];
    for (pos, &j) in order.iter().enumerate() {
        rank[j] = pos + 1;
    }
    let positive_total: f64 = mean.iter().map(|m| m.max(0.0)).sum();
    let share = |j: usize| {
        if positive_total > 0.0 {
            mean[j].max(0.0) / positive_total
        } else {
            0.0
        }
    };
    let top: Vec<ImportanceShare> = order
        .iter()
        .take(10)
        .map(|&j| ImportanceShare {
            feature: names[j].clone(),
            share: share(j),
        })
        .collect();
    let residual_share = order.iter().skip(10).map(|&j| share(j)).sum();
    ImportanceReport {
        features: (0..d)
            .map(|j| FeatureImportance {
                feature: names[j].clone(),
                mean: mean[j],
                std: std[j],
                rank: rank[j],
            })
            .collect(),
        replicates: s,
        per_replicate,
        top,
        residual_share,
    }
}

/// Permutation importances of a surrogate refitted to each bootstrap
/// replicate's CATE on the original rows, aggregated across replicates.
pub fn importance_from_bootstrap(
    ds: &Dataset,
    boot: &BootstrapResult,
    cfg: &ImportanceConfig,
) -> Result<ImportanceReport> {
    let s = cfg
        .max_replicates
        .map_or(boot.cate_draws.len(), |m| m.min(boot.cate_draws.len()));
    if s == 0 {
        return Err(Error::contract(
            "no bootstrap replicates to compute importance from",
        ));
    }
    if boot.cate_draws.iter().any(|c| c.len() != ds.n()) {
        return Err(Error::contract("bootstrap draws do not match the dataset"));
    }
    let results = par::map_indexed(s, |r| -> Result<Vec<f64>> {
        let cate = &boot.cate_draws[r];
        let plan = CvPlan::random(
            ds.n(),
            cfg.k,
            Scoring::NegMse,
            derive_seed(cfg.seed, "surrogate-folds", r as u64),
        )?;
        let sur = fit_cate_surrogate(
            ds.x(),
            cate,
            &plan,
            &cfg.surrogate_grid,
            derive_seed(cfg.seed, "surrogate", r as u64),
        )?;
        permutation_importance(
            &sur.model,
            ds.x(),
            cate,
            cfg.repeats,
            derive_seed(cfg.seed, "importance", r as u64),
        )
    });
    let per_replicate = results.into_iter().collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = ds.schema().iter().map(|c| c.name.clone()).collect();
    Ok(summarize(&names, per_replicate))
}

/// Bootstrap the estimator, then compute importances per replicate.
pub fn importance_over_bootstrap<E: crate::inference::ReplicateEstimator>(
    ds: &Dataset,
    estimator: &E,
    boot_cfg: &crate::inference::BootstrapConfig,
    cfg: &ImportanceConfig,
) -> Result<(ImportanceReport, BootstrapResult)> {
    let boot = crate::inference::bootstrap_effect(ds, estimator, boot_cfg)?;
    Ok((importance_from_bootstrap(ds, &boot, cfg)?, boot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    Median,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub size: usize,
    pub ate: f64,
    pub ci: Interval,
    pub replicate_ates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupContrast {
    pub feature: String,
    pub rule: SplitRule,
    /// Units with value ≤ this (median rule) or equal to it (binary rule)
    /// form the low group.
    pub split_value: f64,
    pub low: GroupEffect,
    pub high: GroupEffect,
    /// High minus low.
    pub difference: f64,
    pub difference_ci: Interval,
    pub warnings: Vec<String>,
}

/// Split the original sample on `feature` and contrast the bootstrap ATEs of
/// the two groups. Under the median rule, units exactly at the median join
/// the low group.
pub fn subgroup_contrast(
    ds: &Dataset,
    boot: &BootstrapResult,
    feature: &str,
    rule: SplitRule,
) -> Result<SubgroupContrast> {
    let j = ds
        .column_index(feature)
        .ok_or_else(|| Error::contract(format!("unknown feature '{feature}'")))?;
    if boot.cate_draws.iter().any(|c| c.len() != ds.n()) {
        return Err(Error::contract("bootstrap draws do not match the dataset"));
    }
    let values: Vec<f64> = ds.x().column(j).iter().copied().collect();
    let split_value = match rule {
        SplitRule::Median => {
            if ds.schema()[j].kind != ColumnKind::Continuous {
                return Err(Error::contract(format!(
                    "median split needs a continuous feature; '{feature}' is not"
                )));
            }
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            quantile_sorted(&sorted, 0.5)
        }
        SplitRule::Binary => {
            if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract(format!(
                    "binary split needs a 0/1 feature; '{feature}' is not"
                )));
            }
            0.0
        }
    };
    if !split_value.is_finite() {
        return Err(Error::contract("split value is not finite"));
    }
    let low_rows: Vec<usize> = (0..ds.n()).filter(|&i| values[i] <= split_value).collect();
    let high_rows: Vec<usize> = (0..ds.n()).filter(|&i| values[i] > split_value).collect();
    let mut warnings = Vec::new();
    for (name, rows) in [("low", &low_rows), ("high", &high_rows)] {
        if rows.len() < 2 {
            return Err(Error::contract(format!(
                "{name} group of '{feature}' has {} units; at least 2 are needed",
                rows.len()
            )));
        }
        if rows.len() < SMALL_GROUP {
            warnings.push(format!(
                "{name} group of '{feature}' has only {} units",
                rows.len()
            ));
        }
    }
    let level = boot.ci.level;
    let group = |rows: &[usize]| -> Result<GroupEffect> {
        let replicate_ates: Vec<f64> = boot
            .cate_draws
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).sum::<f64>() / rows.len() as f64)
            .collect();
        Ok(GroupEffect {
            size: rows.len(),
            ate: replicate_ates.iter().sum::<f64>() / replicate_ates.len() as f64,
            ci: percentile_interval(&replicate_ates, level)?,
            replicate_ates,
        })
    };
    let low = group(&low_rows)?;
    let high = group(&high_rows)?;
    let diffs: Vec<f64> = high
        .replicate_ates
        .iter()
        .zip(&low.replicate_ates)
        .map(|(h, l)| h - l)
        .collect();
    Ok(SubgroupContrast {
        feature: feature.to_string(),
        rule,
        split_value,
        difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
        difference_ci: percentile_interval(&diffs, level)?,
        low,
        high,
        warnings,
    })
}
