use nalgebra::{DMatrix, DVector};

use super::candidate::{CandidateModel, GeeParams};
use super::dataset::PanelDataset;
use super::family::Family;
use crate::error::{ElcicError, Result};

/// Smallest admissible estimated observing probability.
pub const MIN_OBSERVING_PROB: f64 = 1e-3;

/// Coefficients with excluded positions forced to zero.
pub fn padded_beta(cand: &CandidateModel, beta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(beta.len(), |j, _| if cand.mask()[j] { beta[j] } else { 0.0 })
}

/// Mean-model quantities of one unit over its observed occasions.
#[derive(Debug, Clone)]
pub(crate) struct UnitMoments {
    pub times: Vec<usize>,
    pub x: DMatrix<f64>,
    pub resid: DVector<f64>,
    pub dmu: DVector<f64>,
    pub var: DVector<f64>,
}

impl UnitMoments {
    pub fn compute(data: &PanelDataset, i: usize, family: Family, beta: &DVector<f64>) -> Result<Self> {
        let times = data.observed_times(i);
        let xi = data.unit_design(i);
        let x = DMatrix::from_fn(times.len(), xi.ncols(), |r, c| xi[(times[r], c)]);
        let eta = &x * beta;
        let mut resid = DVector::zeros(times.len());
        let mut dmu = DVector::zeros(times.len());
        let mut var = DVector::zeros(times.len());
        for (r, &j) in times.iter().enumerate() {
            let mu = family.mean(eta[r])?;
            resid[r] = data.y(i, j) - mu;
            dmu[r] = family.mean_derivative(mu);
            var[r] = family.variance(mu);
        }
        Ok(Self { times, x, resid, dmu, var })
    }

    /// Pearson residuals `(y - mu) / sqrt(nu)`.
    pub fn pearson(&self) -> DVector<f64> {
        self.resid.zip_map(&self.var, |r, v| r / v.sqrt())
    }

    /// `H = diag(d mu / d eta) X`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut h = self.x.clone();
        for (r, mut row) in h.row_iter_mut().enumerate() {
            row *= self.dmu[r];
        }
        h
    }

    /// Applies `V^{-1}` to the columns of `rhs`, with
    /// `V = phi A^{1/2} R A^{1/2}`.
    pub fn solve_working_cov(&self, params: &GeeParams, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = params.correlation_matrix(&self.times);
        let chol = r.cholesky().ok_or(ElcicError::SingularWorkingCov)?;
        let sd = self.var.map(f64::sqrt);
        if sd.iter().any(|&s| !(s > 0.0)) {
            return Err(ElcicError::SingularWorkingCov);
        }
        let mut scaled = rhs.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            row /= sd[r];
        }
        let mut out = chol.solve(&scaled);
        for (r, mut row) in out.row_iter_mut().enumerate() {
            row /= sd[r] * params.phi;
        }
        Ok(out)
    }
}

/// Score row `x_i (y_i - mu_i(beta~))` of a cross-sectional GLM.
pub fn glm_score_row(data: &PanelDataset, i: usize, cand: &CandidateModel, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if data.n_times() != 1 {
        return Err(ElcicError::InvalidInput("GLM score rows need T = 1".into()));
    }
    if !data.observed(i, 0) {
        return Err(ElcicError::InvalidInput(format!("unit {i} has no observed response")));
    }
    let beta = padded_beta(cand, beta);
    let x = data.unit_design(i).row(0).transpose();
    let mu = cand.family().mean(x.dot(&beta))?;
    Ok(x * (data.y(i, 0) - mu))
}

/// Full GEE estimating row: the mean block `H' V^{-1} (Y - mu)` followed by
/// the lag blocks `U_m - rho_m (c_m - p/n) phi`, where `U_m` sums products of
/// Pearson residuals `m` occasions apart and `c_m` counts those pairs
/// (`c_m = T - m` for a complete unit).
pub fn gee_full_row(data: &PanelDataset, i: usize, cand: &CandidateModel, params: &GeeParams) -> Result<DVector<f64>> {
    let t = data.n_times();
    if t < 2 {
        return Err(ElcicError::InvalidInput("GEE rows need T >= 2".into()));
    }
    if params.rho.len() != t - 1 {
        return Err(ElcicError::InvalidInput(format!(
            "expected {} lag correlations, got {}",
            t - 1,
            params.rho.len()
        )));
    }
    let beta = padded_beta(cand, &params.beta);
    let unit = UnitMoments::compute(data, i, cand.family(), &beta)?;
    let l = data.n_covariates();
    let mut row = DVector::zeros(l + t - 1);
    if unit.times.is_empty() {
        return Ok(row);
    }
    let resid = DMatrix::from_column_slice(unit.resid.len(), 1, unit.resid.as_slice());
    let weighted = unit.solve_working_cov(params, &resid)?;
    let block1 = unit.jacobian().tr_mul(&weighted);
    row.rows_mut(0, l).copy_from(&block1.column(0));

    let e = unit.pearson();
    let ratio = cand.p() as f64 / data.n() as f64;
    let mut products = vec![0.0; t - 1];
    let mut pairs = vec![0usize; t - 1];
    for a in 0..unit.times.len() {
        for b in (a + 1)..unit.times.len() {
            let lag = unit.times[b] - unit.times[a];
            products[lag - 1] += e[a] * e[b];
            pairs[lag - 1] += 1;
        }
    }
    for m in 0..t - 1 {
        row[l + m] = products[m] - params.rho[m] * (pairs[m] as f64 - ratio) * params.phi;
    }
    Ok(row)
}

/// Augmented inverse-probability-weighted row
/// `R/pi x (y - mu) - (R - pi)/pi x (a - mu)` under the identity link.
pub fn aipw_row(
    data: &PanelDataset,
    i: usize,
    cand: &CandidateModel,
    beta: &DVector<f64>,
    pi_hat: f64,
    a_hat: f64,
) -> Result<DVector<f64>> {
    if cand.family() != Family::GaussianIdentity {
        return Err(ElcicError::UnsupportedFamily(format!(
            "AIPW rows are defined for the identity link, got {}",
            cand.family().name()
        )));
    }
    if data.n_times() != 1 {
        return Err(ElcicError::InvalidInput("AIPW rows need T = 1".into()));
    }
    if !(pi_hat >= MIN_OBSERVING_PROB) {
        return Err(ElcicError::DegenerateWeight { pi: pi_hat });
    }
    let beta = padded_beta(cand, beta);
    let x = data.unit_design(i).row(0).transpose();
    let mu = x.dot(&beta);
    let observed = data.observed(i, 0);
    let r = if observed { 1.0 } else { 0.0 };
    let complete = if observed { (data.y(i, 0) - mu) / pi_hat } else { 0.0 };
    let augmentation = (r - pi_hat) / pi_hat * (a_hat - mu);
    Ok(x * (complete - augmentation))
}
