//! Plug-in estimators for the candidate models.
//!
//! Every fit returns coefficients padded to the full design length with exact
//! zeros at excluded positions, plus the working correlation and dispersion
//! for longitudinal fits and the frozen nuisance fits for AIPW.

mod aipw;
mod gee;
mod glm;

pub use aipw::{fit_aipw, NuisanceFormula, NuisanceSpec};
pub use gee::{fit_gee, fit_pgee, fit_pgee_from, scad_derivative, GEE_MAX_ITER, SCAD_A, ZERO_THRESHOLD};
pub use glm::{fit_glm, GLM_MAX_ITER};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::estimating_equations::GeeParams;

/// Convergence tolerance on the mean score norm (GLM) or coefficient change (GEE).
pub const FIT_TOL: f64 = 1e-8;

/// Which estimating-function family a fit plugs into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EquationKind {
    Glm,
    Gee,
    Aipw,
}

/// Nuisance fits of the AIPW estimator, frozen while solving for `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AipwNuisance {
    /// Logistic missingness coefficients; empty when every outcome is observed.
    pub gamma_miss: DVector<f64>,
    /// Imputation regression coefficients.
    pub alpha_imp: DVector<f64>,
    pub pi_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: EquationKind,
    pub params: GeeParams,
    /// Nonzero coefficients. Equals the candidate mask except after PGEE
    /// truncation.
    pub support: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the mean defining score `(1/n) sum_i g1_i` at the estimate.
    pub score_norm: f64,
    pub nuisance: Option<AipwNuisance>,
    /// Penalty level for PGEE fits.
    pub tuning: Option<f64>,
}

impl FitResult {
    pub fn beta(&self) -> &DVector<f64> {
        &self.params.beta
    }
}

/// How a candidate is fitted and which estimating rows it is scored with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Framework {
    Glm,
    Gee,
    Aipw {
        missingness: NuisanceFormula,
        imputation: NuisanceFormula,
    },
}

impl Framework {
    /// GLM for cross-sectional data, GEE otherwise.
    pub fn for_data(data: &crate::estimating_equations::PanelDataset) -> Self {
        if data.n_times() == 1 {
            Framework::Glm
        } else {
            Framework::Gee
        }
    }

    pub fn kind(&self) -> EquationKind {
        match self {
            Framework::Glm => EquationKind::Glm,
            Framework::Gee => EquationKind::Gee,
            Framework::Aipw { .. } => EquationKind::Aipw,
        }
    }
}

/// Fits `cand` under the given framework.
pub fn fit_candidate(
    data: &crate::estimating_equations::PanelDataset,
    cand: &crate::estimating_equations::CandidateModel,
    framework: &Framework,
) -> crate::error::Result<FitResult> {
    match framework {
        Framework::Glm => fit_glm(data, cand),
        Framework::Gee => fit_gee(data, cand),
        Framework::Aipw { missingness, imputation } => fit_aipw(data, cand, missingness, imputation),
    }
}
