//! Penalized linear regression: LASSO by cyclic coordinate descent and Ridge by
//! Cholesky solve of the penalized normal equations. Both use an unpenalized
//! intercept obtained by centering.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub penalty: Penalty,
    pub lambda: f64,
    /// False when coordinate descent stopped at the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

impl LinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        debug_assert_eq!(x.ncols(), self.weights.len());
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + self
                        .weights
                        .iter()
                        .enumerate()
                        .map(|(j, w)| w * x[(i, j)])
                        .sum::<f64>()
            })
            .collect()
    }
}

fn check_target(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::contract(format!(
            "feature rows ({}) and target length ({}) differ",
            x.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::contract("cannot fit on zero rows"));
    }
    if y.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("target contains NaN"));
    }
    Ok(())
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter().map(|c| c.sum() / n).collect()
}

/// Centered design reused across a regularization path.
pub(crate) struct CenteredProblem {
    xc: DMatrix<f64>,
    yc: Vec<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
    /// ‖x_j‖² / n for each centered column.
    col_sq: Vec<f64>,
}

impl CenteredProblem {
    pub(crate) fn new(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        check_target(x, y)?;
        let n = x.nrows();
        let x_mean = column_means(x);
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let col_sq = xc
            .column_iter()
            .map(|c| c.norm_squared() / n as f64)
            .collect();
        Ok(CenteredProblem {
            xc,
            yc,
            x_mean,
            y_mean,
            col_sq,
        })
    }

    pub(crate) fn lambda_max(&self) -> f64 {
        let n = self.yc.len() as f64;
        self.xc
            .column_iter()
            .map(|c| {
                c.iter()
                    .zip(&self.yc)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .abs()
                    / n
            })
            .fold(0.0, f64::max)
    }

    /// Coordinate descent from `warm` (or zeros).
    pub(crate) fn lasso(
        &self,
        lambda: f64,
        tolerance: f64,
        max_iterations: usize,
        warm: Option<&[f64]>,
    ) -> LinearModel {
        let n = self.yc.len();
        let d = self.xc.ncols();
        let nf = n as f64;
        let mut w = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; d]);
        let mut r = self.yc.clone();
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                for (ri, xij) in r.iter_mut().zip(self.xc.column(j).iter()) {
                    *ri -= wj * xij;
                }
            }
        }
        let mut converged = false;
        let mut iterations = 0;
        while iterations < max_iterations {
            iterations += 1;
            let mut max_delta: f64 = 0.0;
            for j in 0..d {
                let a = self.col_sq[j];
                if a <= 0.0 {
                    w[j] = 0.0;
                    continue;
                }
                let col = self.xc.column(j);
                let grad: f64 = col.iter().zip(&r).map(|(x, r)| x * r).sum::<f64>() / nf;
                let rho = grad + a * w[j];
                let new = soft_threshold(rho, lambda) / a;
                let delta = new - w[j];
                if delta != 0.0 {
                    for (ri, xij) in r.iter_mut().zip(col.iter()) {
                        *ri -= delta * xij;
                    }
                    w[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < tolerance {
                converged = true;
                break;
            }
        }
        self.finish(w, Penalty::L1, lambda, converged, iterations)
    }

    fn finish(
        &self,
        w: Vec<f64>,
        penalty: Penalty,
        lambda: f64,
        converged: bool,
        iterations: usize,
    ) -> LinearModel {
        let intercept = self.y_mean - w.iter().zip(&self.x_mean).map(|(a, b)| a * b).sum::<f64>();
        LinearModel {
            intercept,
            weights: w,
            penalty,
            lambda,
            converged,
            iterations,
        }
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Smallest penalty at which every LASSO weight is zero: `max_j |x_jᵀ(y−ȳ)| / n`
/// over centered columns.
pub fn lambda_max(x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    Ok(CenteredProblem::new(x, y)?.lambda_max())
}

/// `points` log-spaced penalties from `lambda_max` down to `ratio * lambda_max`,
/// in decreasing order.
pub fn lambda_grid(lambda_max: f64, points: usize, ratio: f64) -> Vec<f64> {
    let hi = if lambda_max > 0.0 { lambda_max } else { 1e-8 };
    if points <= 1 {
        return vec![hi];
    }
    let lo = hi * ratio;
    let step = (lo.ln() - hi.ln()) / (points - 1) as f64;
    (0..points)
        .map(|k| (hi.ln() + step * k as f64).exp())
        .collect()
}

/// Minimize `½n⁻¹‖y − Xw − b‖² + λ‖w‖₁` by cyclic coordinate descent.
///
/// Stops when the largest coordinate update in a sweep is below `tolerance`.
/// Hitting `max_iterations` is not an error: the model comes back with
/// `converged = false`.
pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<LinearModel> {
    if !(lambda >= 0.0) || !(tolerance > 0.0) {
        return Err(Error::contract("lasso needs lambda >= 0 and tolerance > 0"));
    }
    Ok(CenteredProblem::new(x, y)?.lasso(lambda, tolerance, max_iterations, None))
}

/// Solve `(XᵀX + nλI)w = Xᵀ(y − ȳ)` on centered columns.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearModel> {
    if !(lambda >= 0.0) {
        return Err(Error::contract("ridge needs lambda >= 0"));
    }
    let p = CenteredProblem::new(x, y)?;
    let (gram, rhs) = ridge_system(&p, lambda);
    let chol = gram.cholesky().ok_or_else(|| {
        Error::numerical(if lambda == 0.0 {
            "normal equations are singular; use a ridge penalty lambda > 0".to_string()
        } else {
            "ridge system is not positive definite".to_string()
        })
    })?;
    let w = chol.solve(&rhs);
    if lambda == 0.0 {
        // Cholesky can succeed on numerically rank-deficient Gram matrices.
        let diag_max = (0..w.len())
            .map(|j| chol.l_dirty()[(j, j)])
            .fold(0.0, f64::max);
        let diag_min = (0..w.len())
            .map(|j| chol.l_dirty()[(j, j)])
            .fold(f64::INFINITY, f64::min);
        if !w.is_empty() && diag_min <= diag_max * 1e-7 {
            return Err(Error::numerical(
                "normal equations are singular; use a ridge penalty lambda > 0",
            ));
        }
    }
    Ok(p.finish(w.iter().copied().collect(), Penalty::L2, lambda, true, 1))
}

fn ridge_system(p: &CenteredProblem, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = p.yc.len() as f64;
    let mut gram = p.xc.tr_mul(&p.xc);
    for j in 0..gram.ncols() {
        gram[(j, j)] += n * lambda;
    }
    let rhs = p.xc.tr_mul(&DVector::from_column_slice(&p.yc));
    (gram, rhs)
}

/// Relative residual `‖(XᵀX + nλI)w − Xᵀ(y−ȳ)‖ / (1 + ‖Xᵀ(y−ȳ)‖)` of a ridge fit.
pub fn ridge_normal_equation_residual(
    x: &DMatrix<f64>,
    y: &[f64],
    model: &LinearModel,
) -> Result<f64> {
    let p = CenteredProblem::new(x, y)?;
    let (gram, rhs) = ridge_system(&p, model.lambda);
    let w = DVector::from_column_slice(&model.weights);
    Ok((gram * w - &rhs).norm() / (1.0 + rhs.norm()))
}
