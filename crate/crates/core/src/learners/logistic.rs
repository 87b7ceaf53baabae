//! L2-penalized logistic regression fitted by damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRADIENT_TOLERANCE: f64 = 1e-9;
const MAX_NEWTON_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// Euclidean norm of the objective gradient at the returned point.
    pub gradient_norm: f64,
    pub iterations: usize,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * x[(row, j)])
                .sum::<f64>()
    }

    /// Class-1 probabilities, kept strictly inside (0, 1).
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| sigmoid(self.linear_predictor(x, i)).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
            .collect()
    }
}

/// Penalized mean negative log-likelihood:
/// `−n⁻¹ Σ [yᵢ log pᵢ + (1−yᵢ) log(1−pᵢ)] + ½λ‖w‖²` (intercept unpenalized).
pub fn logistic_objective(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    intercept: f64,
    w: &[f64],
) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let z = intercept
            + w.iter()
                .enumerate()
                .map(|(j, wj)| wj * x[(i, j)])
                .sum::<f64>();
        // log(1 + e^z) − y z, computed stably.
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        total += softplus - y[i] * z;
    }
    total / n as f64 + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LogisticModel> {
    let n = x.nrows();
    let d = x.ncols();
    if y.len() != n || n == 0 {
        return Err(Error::contract("feature rows and target length differ"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::contract("logistic penalty must be >= 0"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("logistic target must be binary"));
    }
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::contract(
            "logistic regression needs both classes in the target",
        ));
    }
    let nf = n as f64;
    let p = d + 1;
    // Parameter vector: [intercept, w_1..w_d].
    let mut beta = DVector::<f64>::zeros(p);
    let mean = positives as f64 / nf;
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut objective = logistic_objective(x, y, lambda, beta[0], &beta.as_slice()[1..]);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_NEWTON_STEPS {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let mut z = beta[0];
            for j in 0..d {
                z += beta[j + 1] * x[(i, j)];
            }
            let pi = sigmoid(z);
            let r = (pi - y[i]) / nf;
            let wgt = pi * (1.0 - pi) / nf;
            grad[0] += r;
            hess[(0, 0)] += wgt;
            for a in 0..d {
                let xa = x[(i, a)];
                grad[a + 1] += r * xa;
                hess[(0, a + 1)] += wgt * xa;
                for b in a..d {
                    hess[(a + 1, b + 1)] += wgt * xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for j in 1..p {
            grad[j] += lambda * beta[j];
            hess[(j, j)] += lambda;
        }
        grad_norm = grad.norm();
        if grad_norm < GRADIENT_TOLERANCE {
            break;
        }
        iterations += 1;
        // Tiny ridge keeps the unpenalized Hessian factorizable under separation.
        let mut h = hess.clone();
        for j in 0..p {
            h[(j, j)] += 1e-12;
        }
        let step = match h.cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone(),
        };
        // Newton decrement at rounding level: no further progress is possible.
        if grad.dot(&step) < 1e-14 * (1.0 + objective.abs()) {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &step * scale;
            let obj = logistic_objective(x, y, lambda, cand[0], &cand.as_slice()[1..]);
            if obj <= objective {
                beta = cand;
                objective = obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if lambda == 0.0 && beta.amax() > 1e4 {
            break;
        }
    }
    let model = LogisticModel {
        intercept: beta[0],
        weights: beta.as_slice()[1..].to_vec(),
        lambda,
        gradient_norm: grad_norm,
        iterations,
    };
    if lambda == 0.0 && separated(&model, x, y) {
        return Err(Error::NonConvergence(
            "classes are separable; maximum likelihood does not exist, use a penalty lambda > 0"
                .into(),
        ));
    }
    if grad_norm >= 1e-6 {
        return Err(Error::NonConvergence(format!(
            "logistic fit stopped with gradient norm {grad_norm:.3e}{}",
            if lambda == 0.0 {
                "; try a penalty lambda > 0"
            } else {
                ""
            }
        )));
    }
    Ok(model)
}

/// Every training point classified with probability within 1e-6 of its label.
fn separated(model: &LogisticModel, x: &DMatrix<f64>, y: &[f64]) -> bool {
    (0..x.nrows()).all(|i| {
        let p = sigmoid(model.linear_predictor(x, i));
        (p - y[i]).abs() < 1e-6
    }) || model.weights.iter().any(|w| w.abs() > 1e4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uninformative_features_give_half() {
        // Each feature pattern appears once in each class.
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                1.0, 0.0, -1.0, 0.5, 0.3, -0.2, -0.3, 0.2, //
                1.0, 0.0, -1.0, 0.5, 0.3, -0.2, -0.3, 0.2,
            ],
        );
        let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let m = fit_logistic(&x, &y, 0.1).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-8));
        for p in m.predict_proba(&x) {
            assert_abs_diff_eq!(p, 0.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn gradient_small_at_optimum() {
        let x = DMatrix::from_fn(50, 2, |i, j| ((i * 11 + j * 5) % 9) as f64 / 3.0 - 1.0);
        let y: Vec<f64> = (0..50)
            .map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 })
            .collect();
        let m = fit_logistic(&x, &y, 0.01).unwrap();
        assert!(m.gradient_norm < 1e-6);
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(fit_logistic(&x, &[1.0; 4], 0.1).is_err());
    }

    #[test]
    fn separation_without_penalty_fails() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err = fit_logistic(&x, &y, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonConvergence(_)), "{err}");
        assert!(err.to_string().contains("lambda > 0"));
        let m = fit_logistic(&x, &y, 0.1).unwrap();
        assert!(m.weights[0] > 0.0);
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let m = LogisticModel {
            intercept: 0.0,
            weights: vec![1e3],
            lambda: 0.0,
            gradient_norm: 0.0,
            iterations: 0,
        };
        for p in m.predict_proba(&x) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    /// Coarse-to-fine grid search over (intercept, slope) on the penalized objective.
    fn grid_search(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> (f64, f64) {
        let (mut cb, mut cw, mut half) = (0.0, 0.0, 4.0);
        for _ in 0..12 {
            let mut best = (f64::INFINITY, cb, cw);
            for a in 0..=40 {
                for b in 0..=40 {
                    let bb = cb - half + 2.0 * half * a as f64 / 40.0;
                    let ww = cw - half + 2.0 * half * b as f64 / 40.0;
                    let obj = logistic_objective(x, y, lambda, bb, &[ww]);
                    if obj < best.0 {
                        best = (obj, bb, ww);
                    }
                }
            }
            cb = best.1;
            cw = best.2;
            half /= 4.0;
        }
        (cb, cw)
    }

    #[test]
    fn four_point_matches_grid_search() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 0.0, 0.5, 2.0]);
        let y = [0.0, 1.0, 0.0, 1.0];
        let lambda = 0.2;
        let m = fit_logistic(&x, &y, lambda).unwrap();
        let (b, w) = grid_search(&x, &y, lambda);
        assert_abs_diff_eq!(m.intercept, b, epsilon = 1e-3);
        assert_abs_diff_eq!(m.weights[0], w, epsilon = 1e-3);
    }
}
