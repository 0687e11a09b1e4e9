//! Empirical-likelihood inner problem.
//!
//! Given the n x L matrix of estimating-function rows `g_i`, the negative log
//! empirical-likelihood ratio is
//!
//! ```text
//! l = max_lambda  sum_i log(1 + lambda' g_i)
//! ```
//!
//! and the implied weights are `p_i = 1 / (n (1 + lambda' g_i))`. The maximum
//! is taken over the concave dual with `log` replaced by a pseudo-logarithm
//! that is quadratic below `1/n`, so the objective is defined for every lambda
//! and Newton iterates never leave the domain. At an interior solution every
//! `1 + lambda' g_i >= 1/n` holds, so the pseudo-logarithm does not change the
//! optimum. When zero is outside the convex hull of the rows the dual is
//! unbounded; the solver stops once the arguments grow past `DIVERGENCE_BOUND`
//! and reports the (large, finite) objective together with `hull_flag = true`.

use nalgebra::{DMatrix, DVector};

use crate::error::{ElcicError, Result};

/// Default gradient tolerance for [`solve_lagrange`].
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default Newton iteration cap for [`solve_lagrange`].
pub const DEFAULT_MAX_ITER: usize = 100;

const MAX_HALVINGS: usize = 50;
const JITTER: f64 = 1e-10;
const DIVERGENCE_BOUND: f64 = 1e12;
const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Rows of estimating functions evaluated at plug-in estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(ElcicError::InvalidInput(format!(
                "score matrix needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(ElcicError::InvalidInput(
                "score matrix needs at least one column".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % values.nrows(), pos / values.nrows());
            return Err(ElcicError::InvalidInput(format!(
                "non-finite score entry at row {row}, column {col}"
            )));
        }
        Ok(Self { values })
    }

    /// Builds a matrix from row vectors, all of the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != l) {
            return Err(ElcicError::InvalidInput(format!(
                "row {bad} has length {} but row 0 has length {l}",
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, l, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_means(&self) -> DVector<f64> {
        self.values.row_mean().transpose()
    }
}

/// Result of the inner Lagrange problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeSolution {
    pub lambda: DVector<f64>,
    /// Negative log empirical-likelihood ratio `l`.
    pub log_el: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Set when the solution is not an interior point of the weight simplex,
    /// i.e. zero is (numerically) outside the convex hull of the rows.
    pub hull_flag: bool,
    pub converged: bool,
}

/// Pseudo-logarithm: `ln x` for `x >= eps`, and the second-order Taylor
/// expansion of `ln` around `eps` below it.
pub fn log_star(x: f64, eps: f64) -> f64 {
    if x >= eps {
        x.ln()
    } else {
        let z = x - eps;
        eps.ln() + z / eps - z * z / (2.0 * eps * eps)
    }
}

fn log_star_d1(x: f64, eps: f64) -> f64 {
    if x >= eps {
        1.0 / x
    } else {
        1.0 / eps - (x - eps) / (eps * eps)
    }
}

/// Negated second derivative (a positive curvature weight).
fn log_star_neg_d2(x: f64, eps: f64) -> f64 {
    if x >= eps {
        1.0 / (x * x)
    } else {
        1.0 / (eps * eps)
    }
}

fn arguments(g: &ScoreMatrix, lambda: &DVector<f64>) -> DVector<f64> {
    let mut a = g.values() * lambda;
    a.add_scalar_mut(1.0);
    a
}

/// Dual objective `D(lambda) = sum_i log_star(1 + lambda' g_i, 1/n)`.
pub fn dual_objective(g: &ScoreMatrix, lambda: &DVector<f64>) -> f64 {
    let eps = 1.0 / g.n() as f64;
    arguments(g, lambda).iter().map(|&a| log_star(a, eps)).sum()
}

/// Analytic gradient of [`dual_objective`].
pub fn dual_gradient(g: &ScoreMatrix, lambda: &DVector<f64>) -> DVector<f64> {
    let eps = 1.0 / g.n() as f64;
    let d1 = arguments(g, lambda).map(|a| log_star_d1(a, eps));
    g.values().tr_mul(&d1)
}

fn newton_direction(g: &ScoreMatrix, curvature: &DVector<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let vals = g.values();
    let weighted = DMatrix::from_fn(vals.nrows(), vals.ncols(), |i, j| vals[(i, j)] * curvature[i]);
    let mut info = vals.tr_mul(&weighted);
    if let Some(chol) = info.clone().cholesky() {
        return Ok(chol.solve(grad));
    }
    for k in 0..info.nrows() {
        info[(k, k)] += JITTER;
    }
    let step = info.cholesky().ok_or(ElcicError::SingularHessian)?.solve(grad);
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(ElcicError::SingularHessian)
    }
}

/// Maximizes the concave dual by damped Newton iterations started at zero.
///
/// Each Newton step is halved (up to 50 times) until the objective does not
/// decrease. Convergence requires the gradient norm to fall below `tol` at an
/// interior point whose implied weights sum to one, after which one more full
/// Newton step is taken if it at least halves the gradient norm; anything else leaves
/// `converged` false and, if the iterate is not interior, sets `hull_flag`.
pub fn solve_lagrange(g: &ScoreMatrix, tol: f64, max_iter: usize) -> Result<LagrangeSolution> {
    if !(tol > 0.0) {
        return Err(ElcicError::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(ElcicError::InvalidInput("max_iter must be at least 1".into()));
    }
    let n = g.n() as f64;
    let eps = 1.0 / n;
    let mut lambda = DVector::zeros(g.cols());
    let mut objective = 0.0;
    let mut iterations = 0;

    let status = loop {
        let args = arguments(g, &lambda);
        let d1 = args.map(|a| log_star_d1(a, eps));
        let grad = g.values().tr_mul(&d1);
        let grad_norm = grad.norm();
        let min_arg = args.min();
        let weight_sum = args.iter().map(|&a| 1.0 / (n * a)).sum::<f64>();
        let interior = min_arg >= eps && (weight_sum - 1.0).abs() <= WEIGHT_SUM_TOL;

        if grad_norm <= tol && interior {
            let curvature = args.map(|a| log_star_neg_d2(a, eps));
            if let Ok(direction) = newton_direction(g, &curvature, &grad) {
                let trial = &lambda + direction;
                let trial_args = arguments(g, &trial);
                let trial_norm = dual_gradient(g, &trial).norm();
                let trial_value = dual_objective(g, &trial);
                if trial_args.min() >= eps && trial_norm < 0.5 * grad_norm && trial_value >= objective {
                    lambda = trial;
                    objective = trial_value;
                    break (trial_norm, true, false);
                }
            }
            break (grad_norm, true, false);
        }
        if args.amax() > DIVERGENCE_BOUND || iterations >= max_iter {
            break (grad_norm, false, !interior);
        }

        let curvature = args.map(|a| log_star_neg_d2(a, eps));
        let direction = newton_direction(g, &curvature, &grad)?;
        iterations += 1;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &lambda + &direction * step;
            let value = dual_objective(g, &trial);
            if value >= objective {
                accepted = Some((trial, value));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, value)) => {
                let moved = (&trial - &lambda).amax();
                lambda = trial;
                objective = value;
                if moved == 0.0 {
                    // Newton step underflowed: no further progress is possible.
                    let args = arguments(g, &lambda);
                    let ws = args.iter().map(|&a| 1.0 / (n * a)).sum::<f64>();
                    let interior = args.min() >= eps && (ws - 1.0).abs() <= WEIGHT_SUM_TOL;
                    let gn = dual_gradient(g, &lambda).norm();
                    break (gn, gn <= tol && interior, !interior);
                }
            }
            None => break (grad_norm, false, !interior),
        }
    };

    let (grad_norm, converged, hull_flag) = status;
    let log_el = if lambda.iter().all(|&v| v == 0.0) { 0.0 } else { objective.max(0.0) };
    Ok(LagrangeSolution {
        lambda,
        log_el,
        iterations,
        grad_norm,
        hull_flag,
        converged,
    })
}

/// Solves with the default tolerance and iteration cap.
pub fn solve_lagrange_default(g: &ScoreMatrix) -> Result<LagrangeSolution> {
    solve_lagrange(g, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// Empirical-likelihood weights `p_i = 1 / (n (1 + lambda' g_i))`.
pub fn el_weights(g: &ScoreMatrix, sol: &LagrangeSolution) -> Result<DVector<f64>> {
    if sol.hull_flag {
        return Err(ElcicError::HullViolation);
    }
    if sol.lambda.len() != g.cols() {
        return Err(ElcicError::InvalidInput(format!(
            "multiplier has length {} but the score matrix has {} columns",
            sol.lambda.len(),
            g.cols()
        )));
    }
    let n = g.n() as f64;
    Ok(arguments(g, &sol.lambda).map(|a| 1.0 / (n * a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn column(values: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(DMatrix::from_column_slice(values.len(), 1, values)).unwrap()
    }

    #[test]
    fn log_star_matches_log_above_threshold() {
        assert_eq!(log_star(1.0, 0.01), 0.0);
        assert_abs_diff_eq!(log_star(0.01, 0.01), 0.01f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_star(0.01, 0.01), -4.605_170_185_988_091, epsilon = 1e-12);
    }

    #[test]
    fn log_star_quadratic_extension_at_zero() {
        // ln(0.01) + (0 - 0.01)/0.01 - (0.01)^2/(2 * 0.01^2)
        let expected = 0.01f64.ln() - 1.0 - 0.5;
        assert_abs_diff_eq!(log_star(0.0, 0.01), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(log_star(0.0, 0.01), -6.105_170_185_988_091, epsilon = 1e-12);
    }

    #[test]
    fn log_star_is_c2_and_monotone_at_threshold() {
        let eps = 0.05;
        let h = 1e-7;
        assert_abs_diff_eq!(log_star(eps - h, eps), log_star(eps + h, eps), epsilon = 1e-5);
        assert_abs_diff_eq!(log_star_d1(eps - h, eps), log_star_d1(eps + h, eps), epsilon = 1e-4);
        assert_abs_diff_eq!(log_star_neg_d2(eps - h, eps), log_star_neg_d2(eps + h, eps), epsilon = 1e-2);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let x = -1.0 + k as f64 * 0.01;
            let v = log_star(x, eps);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn centered_pair_gives_zero() {
        let g = column(&[-1.0, 1.0]);
        let sol = solve_lagrange_default(&g).unwrap();
        assert_eq!(sol.log_el, 0.0);
        assert!(sol.lambda.iter().all(|&v| v == 0.0));
        assert!(sol.converged && !sol.hull_flag);
        let w = el_weights(&g, &sol).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_pair_is_uniform_for_any_scale() {
        for a in [0.3, -2.0, 17.0] {
            let g = column(&[a, -a]);
            let sol = solve_lagrange_default(&g).unwrap();
            let w = el_weights(&g, &sol).unwrap();
            assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn outside_hull_sets_flag_and_large_value() {
        let g = column(&[0.1, 0.2, 0.3]);
        let sol = solve_lagrange_default(&g).unwrap();
        assert!(sol.hull_flag);
        assert!(!sol.converged);
        assert!(sol.log_el > 3f64.ln());
        assert_abs_diff_eq!(sol.log_el, dual_objective(&g, &sol.lambda), epsilon = 1e-9);
        assert_eq!(el_weights(&g, &sol), Err(ElcicError::HullViolation));
    }

    #[test]
    fn collinear_columns_are_rescued_by_jitter() {
        let g = ScoreMatrix::new(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 2.0, -0.5, -1.0, 0.25, 0.5, -0.5, -1.0],
        ))
        .unwrap();
        let sol = solve_lagrange_default(&g).unwrap();
        assert!(sol.converged);
        let w = el_weights(&g, &sol).unwrap();
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ScoreMatrix::new(DMatrix::from_element(1, 1, 0.0)).is_err());
        assert!(ScoreMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, f64::NAN])).is_err());
        assert!(ScoreMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        let g = column(&[1.0, -1.0]);
        assert!(solve_lagrange(&g, 0.0, 10).is_err());
        assert!(solve_lagrange(&g, 1e-8, 0).is_err());
    }
}
