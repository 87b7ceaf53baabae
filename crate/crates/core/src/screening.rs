//! Top-K feature screening along a LASSO regularization path.
//!
//! The path is walked from `lambda_max` downwards with warm starts. The
//! selection is the largest active set that does not exceed the requested K,
//! taken at the largest penalty where that size first appears, so the achieved
//! K can fall short of the target when the path jumps over it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::linear::{lambda_grid, CenteredProblem};

pub const PATH_POINTS: usize = 100;
pub const PATH_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    /// Feature indices ordered by descending |coefficient|.
    pub selected: Vec<usize>,
    /// Coefficients of `selected`, same order.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub target_k: usize,
    pub achieved_k: usize,
    /// Active-set size at each path point, from the largest penalty down.
    pub path_sizes: Vec<usize>,
}

pub fn screen_top_k(x: &DMatrix<f64>, target: &[f64], target_k: usize) -> Result<ScreeningResult> {
    let d = x.ncols();
    if target_k == 0 {
        return Err(Error::contract("target K must be at least 1"));
    }
    if target_k > d {
        return Err(Error::contract(format!(
            "target K = {target_k} exceeds the {d} available features"
        )));
    }
    let problem = CenteredProblem::new(x, target)?;
    let lmax = problem.lambda_max();
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    if target.iter().all(|&v| v == mean) || lmax == 0.0 {
        return Err(Error::contract("screening target has zero variance"));
    }
    let lambdas = lambda_grid(lmax, PATH_POINTS, PATH_RATIO);
    let mut warm: Option<Vec<f64>> = None;
    let mut path = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let m = problem.lasso(lambda, 1e-9, 100_000, warm.as_deref());
        warm = Some(m.weights.clone());
        path.push(m.weights);
    }
    let path_sizes: Vec<usize> = path
        .iter()
        .map(|w| w.iter().filter(|&&v| v != 0.0).count())
        .collect();
    let point = select_path_point(&path_sizes, target_k).expect("lambda_max yields the empty set");
    let (achieved_k, lambda, weights) = (path_sizes[point], lambdas[point], &path[point]);
    let mut selected: Vec<usize> = (0..d).filter(|&j| weights[j] != 0.0).collect();
    selected.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .total_cmp(&weights[a].abs())
            .then(a.cmp(&b))
    });
    let coefficients = selected.iter().map(|&j| weights[j]).collect();
    Ok(ScreeningResult {
        selected,
        coefficients,
        lambda,
        target_k,
        achieved_k,
        path_sizes,
    })
}

/// Index of the first path point whose active-set size is the largest size
/// not exceeding `target_k`.
pub fn select_path_point(sizes: &[usize], target_k: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in sizes.iter().enumerate() {
        if s <= target_k && best.is_none_or(|b| s > sizes[b]) {
            best = Some(i);
        }
    }
    best
}
