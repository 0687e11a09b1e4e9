use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::glm::{expand, irls};
use super::{AipwNuisance, EquationKind, FitResult, GLM_MAX_ITER};
use crate::estimating_equations::{CandidateModel, Family, GeeParams, PanelDataset, MIN_OBSERVING_PROB};
use crate::error::{ElcicError, Result};

const SEPARATION_BOUND: f64 = 30.0;

/// Covariates of a nuisance regression: design columns (excluding the
/// intercept, which is always added) and auxiliary columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NuisanceFormula {
    pub design: Vec<usize>,
    pub aux: Vec<usize>,
}

/// Correct or misspecified working model for a nuisance regression in the
/// missing-outcome design with covariates `x1..x4` and surrogates `s1..s4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceSpec {
    Correct,
    Misspecified,
}

impl NuisanceSpec {
    /// Logistic model for the observing probability.
    pub fn missingness(self) -> NuisanceFormula {
        match self {
            NuisanceSpec::Correct => NuisanceFormula {
                design: vec![],
                aux: vec![0, 1],
            },
            NuisanceSpec::Misspecified => NuisanceFormula {
                design: vec![1, 2, 3, 4],
                aux: vec![0],
            },
        }
    }

    /// Linear model for the conditional mean of the outcome.
    pub fn imputation(self) -> NuisanceFormula {
        match self {
            NuisanceSpec::Correct => NuisanceFormula {
                design: vec![1, 2, 3, 4],
                aux: vec![0],
            },
            NuisanceSpec::Misspecified => NuisanceFormula {
                design: vec![],
                aux: vec![0, 1, 2],
            },
        }
    }
}

impl NuisanceFormula {
    fn matrix(&self, data: &PanelDataset, units: &[usize]) -> Result<DMatrix<f64>> {
        let aux = data.aux();
        if !self.aux.is_empty() && aux.is_none() {
            return Err(ElcicError::InvalidInput("nuisance formula uses auxiliary columns but none are present".into()));
        }
        if let Some(&c) = self.design.iter().find(|&&c| c == 0 || c >= data.n_covariates()) {
            return Err(ElcicError::InvalidInput(format!("nuisance design column {c} out of range")));
        }
        if let Some(&c) = self.aux.iter().find(|&&c| aux.is_some_and(|a| c >= a.ncols())) {
            return Err(ElcicError::InvalidInput(format!("auxiliary column {c} out of range")));
        }
        let width = 1 + self.design.len() + self.aux.len();
        Ok(DMatrix::from_fn(units.len(), width, |r, c| {
            let i = units[r];
            if c == 0 {
                1.0
            } else if c <= self.design.len() {
                data.unit_design(i)[(0, self.design[c - 1])]
            } else {
                aux.map_or(f64::NAN, |a| a[(i, self.aux[c - 1 - self.design.len()])])
            }
        }))
    }
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = x.tr_mul(x).cholesky().ok_or(ElcicError::RankDeficient)?;
    Ok(chol.solve(&x.tr_mul(y)))
}

/// Augmented inverse-probability-weighted estimator for a linear mean with
/// missing outcomes. The missingness model is logistic, the imputation model
/// is least squares on the complete cases, and both are held fixed while the
/// linear estimating equation is solved for the candidate's coefficients.
pub fn fit_aipw(
    data: &PanelDataset,
    cand: &CandidateModel,
    missingness: &NuisanceFormula,
    imputation: &NuisanceFormula,
) -> Result<FitResult> {
    if data.n_times() != 1 {
        return Err(ElcicError::InvalidInput("AIPW fitting needs T = 1".into()));
    }
    if cand.family() != Family::GaussianIdentity {
        return Err(ElcicError::UnsupportedFamily(format!(
            "AIPW is implemented for the identity link, got {}",
            cand.family().name()
        )));
    }
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let complete: Vec<usize> = all.iter().copied().filter(|&i| data.observed(i, 0)).collect();
    if complete.is_empty() {
        return Err(ElcicError::InvalidInput("no observed outcomes".into()));
    }

    let z = missingness.matrix(data, &all)?;
    let (gamma_miss, pi_hat) = if complete.len() == n {
        (DVector::zeros(0), vec![1.0; n])
    } else {
        let r = DVector::from_fn(n, |i, _| if data.observed(i, 0) { 1.0 } else { 0.0 });
        let gamma = match irls(Family::BinomialLogit, &z, &r, None, GLM_MAX_ITER) {
            Ok(out) => out.beta,
            Err(ElcicError::Diverged { .. }) => return Err(ElcicError::Separation),
            Err(e) => return Err(e),
        };
        if gamma.amax() > SEPARATION_BOUND {
            return Err(ElcicError::Separation);
        }
        let eta = &z * &gamma;
        let pi: Vec<f64> = eta.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect();
        (gamma, pi)
    };
    if let Some((i, &pi)) = pi_hat.iter().enumerate().find(|(_, &p)| !(p >= MIN_OBSERVING_PROB)) {
        return Err(ElcicError::DegenerateWeight { pi }.at_unit(i));
    }

    let w_cc = imputation.matrix(data, &complete)?;
    let y_cc = DVector::from_fn(complete.len(), |r, _| data.y(complete[r], 0));
    let alpha_imp = least_squares(&w_cc, &y_cc)?;
    let a_hat: Vec<f64> = (imputation.matrix(data, &all)? * &alpha_imp).iter().copied().collect();

    let pseudo = DVector::from_fn(n, |i, _| {
        let pi = pi_hat[i];
        if data.observed(i, 0) {
            data.y(i, 0) / pi - (1.0 - pi) / pi * a_hat[i]
        } else {
            a_hat[i]
        }
    });
    let cols = cand.included();
    let x = DMatrix::from_fn(n, cols.len(), |r, c| data.unit_design(r)[(0, cols[c])]);
    let beta = least_squares(&x, &pseudo)?;
    let score_norm = x.tr_mul(&(&pseudo - &x * &beta)).norm() / n as f64;
    Ok(FitResult {
        kind: EquationKind::Aipw,
        params: GeeParams::independent(expand(&beta, &cols, data.n_covariates()), 1),
        support: cand.mask().to_vec(),
        converged: true,
        iterations: 1,
        score_norm,
        nuisance: Some(AipwNuisance {
            gamma_miss,
            alpha_imp,
            pi_hat,
            a_hat,
        }),
        tuning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimating_equations::aipw_row;
    use approx::assert_abs_diff_eq;

    fn data(observed: &[bool]) -> PanelDataset {
        let n = observed.len();
        let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { (r as f64 * 0.37).sin() * 2.0 });
        let aux = DMatrix::from_fn(n, 1, |r, _| design[(r, 1)] + (r as f64 * 1.3).cos());
        let y = DMatrix::from_fn(n, 1, |r, _| {
            if observed[r] {
                1.0 + 2.0 * design[(r, 1)] + (r as f64 * 2.1).cos()
            } else {
                f64::NAN
            }
        });
        let x = (0..n).map(|i| design.rows(i, 1).into_owned()).collect();
        let names = vec!["intercept".to_string(), "x1".to_string()];
        PanelDataset::new(y, x, observed.to_vec(), Some(aux), names).unwrap()
    }

    fn formula() -> NuisanceFormula {
        NuisanceFormula {
            design: vec![1],
            aux: vec![0],
        }
    }

    #[test]
    fn complete_data_is_least_squares() {
        let d = data(&[true; 30]);
        let cand = CandidateModel::glm(Family::GaussianIdentity, 2, &[1]).unwrap();
        let fit = fit_aipw(&d, &cand, &formula(), &formula()).unwrap();
        let x = DMatrix::from_fn(30, 2, |r, c| d.unit_design(r)[(0, c)]);
        let y = DVector::from_fn(30, |r, _| d.y(r, 0));
        let ols = least_squares(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.beta()[1], ols[1], epsilon = 1e-10);
        assert!(fit.nuisance.unwrap().pi_hat.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn rows_sum_to_zero_at_estimate() {
        let observed: Vec<bool> = (0..60).map(|i| i % 3 != 0 || i % 7 == 0).collect();
        let d = data(&observed);
        let cand = CandidateModel::glm(Family::GaussianIdentity, 2, &[1]).unwrap();
        let fit = fit_aipw(&d, &cand, &formula(), &formula()).unwrap();
        let nu = fit.nuisance.as_ref().unwrap();
        let mut total = DVector::zeros(2);
        for i in 0..60 {
            total += aipw_row(&d, i, &cand, fit.beta(), nu.pi_hat[i], nu.a_hat[i]).unwrap();
        }
        assert!(total.amax() < 1e-9);
    }

    #[test]
    fn perfect_separation_is_reported() {
        // Observed exactly when the auxiliary variable is large.
        let base = data(&[true; 40]);
        let s = base.aux().unwrap().clone();
        let observed: Vec<bool> = (0..40).map(|i| s[(i, 0)] > 0.0).collect();
        let d = data(&observed);
        let f = NuisanceFormula { design: vec![], aux: vec![0] };
        let cand = CandidateModel::glm(Family::GaussianIdentity, 2, &[1]).unwrap();
        let err = fit_aipw(&d, &cand, &f, &formula()).unwrap_err();
        assert_eq!(err, ElcicError::Separation);
    }
}
