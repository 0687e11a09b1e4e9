//! Full estimating-function rows for every supported family.
//!
//! Rows always have the candidate-independent length `L` of the full design
//! (plus the `T - 1` lag equations for longitudinal fits), with coefficients
//! of excluded covariates padded by zeros. That shared length is what makes
//! criterion values comparable across candidates.

mod candidate;
mod dataset;
mod family;
mod rows;

pub use candidate::{CandidateModel, CorrStructure, GeeParams};
pub use dataset::PanelDataset;
pub use family::Family;
pub use rows::{aipw_row, gee_full_row, glm_score_row, padded_beta, MIN_OBSERVING_PROB};
pub(crate) use rows::UnitMoments;

use nalgebra::DMatrix;

use crate::el_core::ScoreMatrix;
use crate::error::{ElcicError, Result};
use crate::model_fitting::{EquationKind, FitResult};

/// Length of a full estimating row for this panel and equation kind.
pub fn row_length(data: &PanelDataset, kind: EquationKind) -> usize {
    match kind {
        EquationKind::Glm | EquationKind::Aipw => data.n_covariates(),
        EquationKind::Gee => data.n_covariates() + data.n_times() - 1,
    }
}

/// Evaluates the family-appropriate row for unit `i` at the fitted values.
pub fn unit_row(data: &PanelDataset, i: usize, cand: &CandidateModel, fit: &FitResult) -> Result<nalgebra::DVector<f64>> {
    match fit.kind {
        EquationKind::Glm => glm_score_row(data, i, cand, &fit.params.beta),
        EquationKind::Gee => gee_full_row(data, i, cand, &fit.params),
        EquationKind::Aipw => {
            let nuisance = fit
                .nuisance
                .as_ref()
                .ok_or_else(|| ElcicError::InvalidInput("AIPW fit carries no nuisance estimates".into()))?;
            aipw_row(data, i, cand, &fit.params.beta, nuisance.pi_hat[i], nuisance.a_hat[i])
        }
    }
}

/// Stacks the rows of every unit into the `n x L` score matrix.
pub fn build_score_matrix(data: &PanelDataset, cand: &CandidateModel, fit: &FitResult) -> Result<ScoreMatrix> {
    if cand.n_covariates() != data.n_covariates() {
        return Err(ElcicError::InvalidInput(format!(
            "candidate has {} covariates, data has {}",
            cand.n_covariates(),
            data.n_covariates()
        )));
    }
    let n = data.n();
    let l = row_length(data, fit.kind);
    let mut values = DMatrix::zeros(n, l);
    for i in 0..n {
        let row = unit_row(data, i, cand, fit).map_err(|e| e.at_unit(i))?;
        values.row_mut(i).copy_from(&row.transpose());
    }
    ScoreMatrix::new(values)
}
