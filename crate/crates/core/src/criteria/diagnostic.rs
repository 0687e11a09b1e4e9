use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::el_core::solve_lagrange_default;
use crate::error::{ElcicError, Result};
use crate::estimating_equations::{build_score_matrix, unit_row, CandidateModel, PanelDataset};
use crate::model_fitting::FitResult;

/// Central-difference step of the numeric Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Estimated weights of the weighted chi-square limit of `2 l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticDiagnostic {
    pub omega_hat: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    /// `2 l` on the data the diagnostic was computed from.
    pub empirical_mean_2l: f64,
}

fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Sample estimate of `Omega = S11^{1/2} S*' S11^{-1} S* S11^{1/2}` with
/// `S* = I - S12 E1^{-1} P`, where `P` selects the rows of the candidate's
/// own coefficients.
pub fn asymptotic_diagnostic(data: &PanelDataset, cand: &CandidateModel, fit: &FitResult) -> Result<AsymptoticDiagnostic> {
    let g = build_score_matrix(data, cand, fit)?;
    let n = g.n();
    let l = g.cols();
    let gm = g.values();
    let sigma11 = gm.tr_mul(gm) / n as f64;

    let cols = cand.included();
    let k = cols.len();
    let mut sigma12 = DMatrix::zeros(l, k);
    for (c, &j) in cols.iter().enumerate() {
        let mut up = fit.clone();
        let mut down = fit.clone();
        up.params.beta[j] += JACOBIAN_STEP;
        down.params.beta[j] -= JACOBIAN_STEP;
        for i in 0..n {
            let diff = unit_row(data, i, cand, &up)? - unit_row(data, i, cand, &down)?;
            let mut col = sigma12.column_mut(c);
            col += diff / (2.0 * JACOBIAN_STEP * n as f64);
        }
    }
    let e1 = DMatrix::from_fn(k, k, |r, c| sigma12[(cols[r], c)]);
    let e1_inv = e1.clone().lu().try_inverse().ok_or(ElcicError::SingularBlock)?;
    if !e1_inv.iter().all(|v| v.is_finite()) {
        return Err(ElcicError::SingularBlock);
    }
    let mut select = DMatrix::zeros(k, l);
    for (r, &j) in cols.iter().enumerate() {
        select[(r, j)] = 1.0;
    }
    let s_star = DMatrix::identity(l, l) - &sigma12 * e1_inv * select;

    let eig = SymmetricEigen::new(sigma11.clone());
    let floor = eig.eigenvalues.max() * 1e-12;
    if eig.eigenvalues.iter().any(|&v| !(v > floor)) {
        return Err(ElcicError::SingularBlock);
    }
    let root = sym_function(&sigma11, f64::sqrt);
    let inv = sym_function(&sigma11, |v| 1.0 / v);
    let omega = &root * s_star.transpose() * inv * &s_star * &root;
    let omega = (&omega + omega.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(omega.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let sol = solve_lagrange_default(&g)?;
    Ok(AsymptoticDiagnostic {
        trace: omega.trace(),
        omega_hat: omega,
        eigenvalues,
        empirical_mean_2l: 2.0 * sol.log_el,
    })
}

/// Draws from `sum_j w_j chi2_1` given standard normal draws.
pub fn weighted_chi2(weights: &[f64], normals: &DVector<f64>) -> f64 {
    weights.iter().zip(normals.iter()).map(|(w, z)| w * z * z).sum()
}
