use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{ElcicError, Result};
use crate::estimating_equations::{padded_beta, CandidateModel, Family, PanelDataset, UnitMoments};
use crate::model_fitting::{fit_gee, fit_glm, EquationKind, FitResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodCriteria {
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub gic: f64,
    /// `trace(J^{-1} K)`.
    pub gic_trace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiCriteria {
    /// Quasi-likelihood under independence at the candidate's estimate.
    pub quasi_loglik: f64,
    pub qic: f64,
    pub qic_b: f64,
    pub cic: f64,
}

fn loglik_term(family: Family, y: f64, mu: f64) -> Result<f64> {
    match family {
        Family::PoissonLog => Ok(if y == 0.0 { -mu } else { y * mu.ln() - mu - ln_gamma(y + 1.0) }),
        Family::BinomialLogit => Ok(if y == 1.0 {
            mu.ln()
        } else if y == 0.0 {
            (1.0 - mu).ln()
        } else {
            y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()
        }),
        Family::GaussianIdentity => Err(ElcicError::UnsupportedFamily(
            "AIC/BIC/GIC need a likelihood with no free dispersion (poisson or binomial)".into(),
        )),
    }
}

pub(crate) fn likelihood_from_fit(data: &PanelDataset, cand: &CandidateModel, fit: &FitResult) -> Result<LikelihoodCriteria> {
    if fit.kind != EquationKind::Glm {
        return Err(ElcicError::UnsupportedFamily("AIC/BIC/GIC are defined for cross-sectional GLM fits".into()));
    }
    let family = cand.family();
    let cols = cand.included();
    let k = cols.len();
    let beta = padded_beta(cand, &fit.params.beta);
    let n = data.n() as f64;
    let mut loglik = 0.0;
    let mut j = DMatrix::zeros(k, k);
    let mut kk = DMatrix::zeros(k, k);
    for i in 0..data.n() {
        let row = data.unit_design(i).row(0);
        let mu = family.mean(row.dot(&beta.transpose()))?;
        let y = data.y(i, 0);
        loglik += loglik_term(family, y, mu)?;
        let x = DVector::from_fn(k, |c, _| row[cols[c]]);
        let xxt = &x * x.transpose();
        j += &xxt * family.variance(mu);
        kk += xxt * (y - mu).powi(2);
    }
    j /= n;
    kk /= n;
    let gic_trace = j
        .cholesky()
        .ok_or(ElcicError::RankDeficient)?
        .solve(&kk)
        .trace();
    let p = k as f64;
    Ok(LikelihoodCriteria {
        loglik,
        aic: -2.0 * loglik + 2.0 * p,
        bic: -2.0 * loglik + p * n.ln(),
        gic: -2.0 * loglik + 2.0 * gic_trace,
        gic_trace,
    })
}

/// AIC, BIC and the trace-form GIC at the maximum-likelihood fit.
pub fn aic_bic_gic(data: &PanelDataset, cand: &CandidateModel) -> Result<LikelihoodCriteria> {
    if cand.family() == Family::GaussianIdentity || data.n_times() != 1 {
        return Err(ElcicError::UnsupportedFamily(format!(
            "AIC/BIC/GIC need a cross-sectional poisson or binomial model, got {} with T = {}",
            cand.family().name(),
            data.n_times()
        )));
    }
    let fit = fit_glm(data, cand)?;
    likelihood_from_fit(data, cand, &fit)
}

pub(crate) fn quasi_from_fit(data: &PanelDataset, cand: &CandidateModel, fit: &FitResult) -> Result<QuasiCriteria> {
    if fit.kind != EquationKind::Gee {
        return Err(ElcicError::UnsupportedFamily("QIC/CIC are defined for GEE fits".into()));
    }
    let family = cand.family();
    let scale = match family {
        Family::GaussianIdentity => fit.params.phi,
        Family::PoissonLog | Family::BinomialLogit => 1.0,
    };
    let cols = cand.included();
    let k = cols.len();
    let beta = padded_beta(cand, &fit.params.beta);
    let mut params = fit.params.clone();
    params.beta = beta.clone();

    let mut quasi = 0.0;
    let mut omega = DMatrix::zeros(k, k);
    let mut bread = DMatrix::zeros(k, k);
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..data.n() {
        let u = UnitMoments::compute(data, i, family, &beta).map_err(|e| e.at_unit(i))?;
        let m = u.times.len();
        if m == 0 {
            continue;
        }
        for (r, &j) in u.times.iter().enumerate() {
            quasi += family.quasi_loglik(data.y(i, j), data.y(i, j) - u.resid[r]);
        }
        let jac = u.jacobian();
        let h = DMatrix::from_fn(m, k, |r, c| jac[(r, cols[c])]);
        let ha = DMatrix::from_fn(m, k, |r, c| h[(r, c)] / u.var[r]);
        omega += h.tr_mul(&ha);
        let mut rhs = DMatrix::zeros(m, k + 1);
        rhs.columns_mut(0, k).copy_from(&h);
        rhs.column_mut(k).copy_from(&u.resid);
        let solved = u.solve_working_cov(&params, &rhs).map_err(|e| e.at_unit(i))?;
        bread += h.tr_mul(&solved.columns(0, k));
        let s = h.tr_mul(&solved.column(k));
        meat += &s * s.transpose();
    }
    omega /= scale;
    quasi /= scale;
    let inv = bread.cholesky().ok_or(ElcicError::RankDeficient)?.inverse();
    let robust = &inv * meat * &inv;
    let cic = (omega * robust).trace();
    Ok(QuasiCriteria {
        quasi_loglik: quasi,
        qic: -2.0 * quasi + 2.0 * cic,
        qic_b: -2.0 * quasi + k as f64 * (data.n() as f64).ln(),
        cic,
    })
}

/// QIC, its BIC-penalty variant and CIC for a GEE candidate.
pub fn qic_family(data: &PanelDataset, cand: &CandidateModel) -> Result<QuasiCriteria> {
    let fit = fit_gee(data, cand)?;
    quasi_from_fit(data, cand, &fit)
}
