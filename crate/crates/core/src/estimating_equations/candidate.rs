use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::family::Family;
use crate::error::{ElcicError, Result};

/// Working correlation structure of a marginal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorrStructure {
    #[serde(rename = "IND")]
    Independence,
    #[serde(rename = "EXC")]
    Exchangeable,
    #[serde(rename = "AR1")]
    Ar1,
    #[serde(rename = "STATIONARY")]
    Stationary,
}

impl CorrStructure {
    /// Free correlation parameters for a panel with `n_times` occasions.
    pub fn dof(self, n_times: usize) -> usize {
        match self {
            CorrStructure::Independence => 0,
            CorrStructure::Exchangeable | CorrStructure::Ar1 => 1,
            CorrStructure::Stationary => n_times.saturating_sub(1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CorrStructure::Independence => "IND",
            CorrStructure::Exchangeable => "EXC",
            CorrStructure::Ar1 => "AR1",
            CorrStructure::Stationary => "STA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ind" | "independence" => Some(CorrStructure::Independence),
            "exc" | "exchangeable" | "cs" => Some(CorrStructure::Exchangeable),
            "ar1" => Some(CorrStructure::Ar1),
            "sta" | "stationary" => Some(CorrStructure::Stationary),
            _ => None,
        }
    }

    /// Lag correlations `rho_1..rho_{T-1}` induced by a scalar parameter.
    pub fn lag_correlations(self, alpha: f64, n_times: usize) -> Vec<f64> {
        (1..n_times)
            .map(|m| match self {
                CorrStructure::Independence => 0.0,
                CorrStructure::Exchangeable | CorrStructure::Stationary => alpha,
                CorrStructure::Ar1 => alpha.powi(m as i32),
            })
            .collect()
    }
}

impl fmt::Display for CorrStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A candidate model: covariate inclusion mask, working correlation and
/// family, together with its parameter count `p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateModel {
    mask: Vec<bool>,
    corr: CorrStructure,
    family: Family,
    p: usize,
}

impl CandidateModel {
    /// `mask[0]` is the intercept and must be set. `p` defaults to the number
    /// of included covariates plus the correlation degrees of freedom.
    pub fn new(mask: Vec<bool>, corr: CorrStructure, family: Family, n_times: usize) -> Result<Self> {
        if mask.first() != Some(&true) {
            return Err(ElcicError::InvalidInput("intercept must be included in every candidate".into()));
        }
        if n_times < 2 && corr != CorrStructure::Independence {
            return Err(ElcicError::InvalidInput(format!(
                "{corr} working correlation needs at least two occasions"
            )));
        }
        let p = mask.iter().filter(|&&m| m).count() + corr.dof(n_times);
        Ok(Self { mask, corr, family, p })
    }

    /// Cross-sectional candidate with the given covariate columns (1-based,
    /// the intercept is implicit).
    pub fn glm(family: Family, n_covariates: usize, included: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n_covariates];
        mask[0] = true;
        for &c in included {
            if c == 0 || c >= n_covariates {
                return Err(ElcicError::InvalidInput(format!("covariate index {c} out of range")));
            }
            mask[c] = true;
        }
        Self::new(mask, CorrStructure::Independence, family, 1)
    }

    /// Overrides the penalty count `p`.
    pub fn with_p(mut self, p: usize) -> Self {
        self.p = p;
        self
    }

    pub fn with_corr(&self, corr: CorrStructure, n_times: usize) -> Result<Self> {
        Self::new(self.mask.clone(), corr, self.family, n_times)
    }

    pub fn with_mask(&self, mask: Vec<bool>, n_times: usize) -> Result<Self> {
        Self::new(mask, self.corr, self.family, n_times)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn corr(&self) -> CorrStructure {
        self.corr
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_covariates(&self) -> usize {
        self.mask.len()
    }

    /// Number of mean-structure coefficients.
    pub fn mean_params(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn included(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect()
    }

    /// `{x1,x2}` style label of the non-intercept covariates.
    pub fn mean_label(&self, names: &[String]) -> String {
        let inner: Vec<&str> = self
            .included()
            .into_iter()
            .filter(|&j| j > 0)
            .map(|j| names.get(j).map_or("?", String::as_str))
            .collect();
        format!("{{{}}}", inner.join(","))
    }

    /// Mean label prefixed by the correlation structure for longitudinal fits.
    pub fn label(&self, names: &[String], longitudinal: bool) -> String {
        if longitudinal {
            format!("{}:{}", self.corr, self.mean_label(names))
        } else {
            self.mean_label(names)
        }
    }
}

/// Parameters plugged into the estimating functions.
#[derive(Debug, Clone, PartialEq)]
pub struct GeeParams {
    /// Zero-padded mean coefficients, length `L`.
    pub beta: DVector<f64>,
    /// Lag correlations `rho_1..rho_{T-1}`.
    pub rho: Vec<f64>,
    /// Over-dispersion.
    pub phi: f64,
}

impl GeeParams {
    pub fn independent(beta: DVector<f64>, n_times: usize) -> Self {
        Self {
            beta,
            rho: vec![0.0; n_times.saturating_sub(1)],
            phi: 1.0,
        }
    }

    pub fn structured(beta: DVector<f64>, corr: CorrStructure, alpha: f64, phi: f64, n_times: usize) -> Self {
        Self {
            beta,
            rho: corr.lag_correlations(alpha, n_times),
            phi,
        }
    }

    /// Working correlation among the listed occasions.
    pub fn correlation_matrix(&self, times: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(times.len(), times.len(), |a, b| {
            let lag = times[a].abs_diff(times[b]);
            if lag == 0 {
                1.0
            } else {
                self.rho[lag - 1]
            }
        })
    }

    pub fn validate(&self, cand: &CandidateModel) -> Result<()> {
        if self.beta.len() != cand.n_covariates() {
            return Err(ElcicError::InvalidInput(format!(
                "beta has length {} but the design has {} columns",
                self.beta.len(),
                cand.n_covariates()
            )));
        }
        if let Some(j) = (0..self.beta.len()).find(|&j| !cand.mask()[j] && self.beta[j] != 0.0) {
            return Err(ElcicError::InvalidInput(format!("beta[{j}] is nonzero but excluded by the mask")));
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(ElcicError::InvalidInput("lag correlations must lie in (-1, 1)".into()));
        }
        if !(self.phi > 0.0) {
            return Err(ElcicError::InvalidInput(format!("dispersion must be positive, got {}", self.phi)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_includes_correlation_dof() {
        let m = vec![true, true, true, false];
        let fam = Family::PoissonLog;
        assert_eq!(CandidateModel::new(m.clone(), CorrStructure::Independence, fam, 3).unwrap().p(), 3);
        assert_eq!(CandidateModel::new(m.clone(), CorrStructure::Exchangeable, fam, 3).unwrap().p(), 4);
        assert_eq!(CandidateModel::new(m.clone(), CorrStructure::Ar1, fam, 5).unwrap().p(), 4);
        assert_eq!(CandidateModel::new(m, CorrStructure::Stationary, fam, 5).unwrap().p(), 7);
    }

    #[test]
    fn intercept_is_mandatory() {
        assert!(CandidateModel::new(vec![false, true], CorrStructure::Independence, Family::PoissonLog, 1).is_err());
    }

    #[test]
    fn structured_correlations() {
        let b = DVector::zeros(2);
        assert_eq!(
            GeeParams::structured(b.clone(), CorrStructure::Ar1, 0.5, 1.0, 4).rho,
            vec![0.5, 0.25, 0.125]
        );
        assert_eq!(
            GeeParams::structured(b.clone(), CorrStructure::Exchangeable, 0.3, 1.0, 3).rho,
            vec![0.3, 0.3]
        );
        assert_eq!(GeeParams::structured(b, CorrStructure::Independence, 0.3, 1.0, 3).rho, vec![0.0, 0.0]);
    }

    #[test]
    fn labels() {
        let names: Vec<String> = ["intercept", "x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
        let c = CandidateModel::glm(Family::PoissonLog, 4, &[1, 3]).unwrap();
        assert_eq!(c.mean_label(&names), "{x1,x3}");
        let g = c.with_corr(CorrStructure::Exchangeable, 3).unwrap();
        assert_eq!(g.label(&names, true), "EXC:{x1,x3}");
    }
}
