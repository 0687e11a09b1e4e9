use nalgebra::{DMatrix, DVector};

use super::glm::{expand, irls, stacked};
use super::{EquationKind, FitResult, FIT_TOL};
use crate::estimating_equations::{CandidateModel, CorrStructure, GeeParams, PanelDataset, UnitMoments};
use crate::error::{ElcicError, Result};

pub const GEE_MAX_ITER: usize = 200;
/// SCAD shape constant.
pub const SCAD_A: f64 = 3.7;
/// Penalized coefficients below this magnitude are set to zero.
pub const ZERO_THRESHOLD: f64 = 1e-4;
const LQA_EPS: f64 = 1e-6;
const CORR_CLAMP: f64 = 0.95;

/// Derivative `q_lambda(theta)` of the SCAD penalty at `theta >= 0`.
pub fn scad_derivative(theta: f64, lambda: f64) -> f64 {
    let theta = theta.abs();
    if theta <= lambda {
        lambda
    } else if theta < SCAD_A * lambda {
        (SCAD_A * lambda - theta) / (SCAD_A - 1.0)
    } else {
        0.0
    }
}

fn unit_moments(data: &PanelDataset, cand: &CandidateModel, beta: &DVector<f64>) -> Result<Vec<UnitMoments>> {
    (0..data.n())
        .map(|i| UnitMoments::compute(data, i, cand.family(), beta).map_err(|e| e.at_unit(i)))
        .collect()
}

fn correlation_is_pd(rho: &[f64], t: usize) -> bool {
    if rho.iter().any(|r| !(r.abs() < 1.0)) {
        return false;
    }
    let times: Vec<usize> = (0..t).collect();
    let probe = GeeParams {
        beta: DVector::zeros(0),
        rho: rho.to_vec(),
        phi: 1.0,
    };
    probe.correlation_matrix(&times).cholesky().is_some()
}

/// Moment estimates of the dispersion and lag correlations at the current
/// residuals.
fn moment_estimates(units: &[UnitMoments], corr: CorrStructure, t: usize, p_mean: usize) -> Result<(f64, Vec<f64>)> {
    let mut sum_sq = 0.0;
    let mut n_obs = 0usize;
    let mut products = vec![0.0; t - 1];
    let mut pairs = vec![0usize; t - 1];
    for u in units {
        let e = u.pearson();
        sum_sq += e.norm_squared();
        n_obs += e.len();
        for a in 0..u.times.len() {
            for b in (a + 1)..u.times.len() {
                let lag = u.times[b] - u.times[a];
                products[lag - 1] += e[a] * e[b];
                pairs[lag - 1] += 1;
            }
        }
    }
    if n_obs <= p_mean {
        return Err(ElcicError::InvalidInput(format!(
            "{n_obs} observed responses cannot support {p_mean} mean parameters"
        )));
    }
    let phi = sum_sq / (n_obs - p_mean) as f64;
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(ElcicError::SingularWorkingCov);
    }
    let scaled = |s: f64, c: usize| s / ((c as f64 - p_mean as f64).max(1.0) * phi);
    let (rho, alpha) = match corr {
        CorrStructure::Independence => return Ok((phi, vec![0.0; t - 1])),
        CorrStructure::Exchangeable => {
            let a = scaled(products.iter().sum(), pairs.iter().sum());
            (corr.lag_correlations(a, t), a)
        }
        CorrStructure::Ar1 => {
            let a = scaled(products[0], pairs[0]);
            (corr.lag_correlations(a, t), a)
        }
        CorrStructure::Stationary => {
            let r: Vec<f64> = (0..t - 1).map(|m| scaled(products[m], pairs[m])).collect();
            let a = r[0];
            (r, a)
        }
    };
    if correlation_is_pd(&rho, t) {
        return Ok((phi, rho));
    }
    let rho: Vec<f64> = match corr {
        CorrStructure::Stationary => rho.iter().map(|r| r.clamp(-CORR_CLAMP, CORR_CLAMP)).collect(),
        _ => corr.lag_correlations(alpha.clamp(-CORR_CLAMP, CORR_CLAMP), t),
    };
    if correlation_is_pd(&rho, t) {
        Ok((phi, rho))
    } else {
        Err(ElcicError::NonPdWorkingCorr { alpha })
    }
}

/// `sum_i H' V^{-1} H` and `sum_i H' V^{-1} (Y - mu)` on the listed columns.
fn assemble(units: &[UnitMoments], params: &GeeParams, cols: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = cols.len();
    let mut info = DMatrix::zeros(k, k);
    let mut score = DVector::zeros(k);
    for (i, u) in units.iter().enumerate() {
        let m = u.times.len();
        if m == 0 {
            continue;
        }
        let jac = u.jacobian();
        let h = DMatrix::from_fn(m, k, |r, c| jac[(r, cols[c])]);
        let mut rhs = DMatrix::zeros(m, k + 1);
        rhs.columns_mut(0, k).copy_from(&h);
        rhs.column_mut(k).copy_from(&u.resid);
        let solved = u.solve_working_cov(params, &rhs).map_err(|e| e.at_unit(i))?;
        info += h.tr_mul(&solved.columns(0, k));
        score += h.tr_mul(&solved.column(k));
    }
    Ok((info, score))
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.lu().solve(b).ok_or(ElcicError::RankDeficient)
}

/// Whether setting the `zero` positions to zero and re-solving the others
/// leaves every zeroed score within the penalty bound `bound`, under the
/// linearization at `beta`.
#[allow(clippy::too_many_arguments)]
fn zero_is_optimal(
    info: &DMatrix<f64>,
    score: &DVector<f64>,
    jac: &DMatrix<f64>,
    rhs: &DVector<f64>,
    beta: &DVector<f64>,
    cols: &[usize],
    zero: &[usize],
    bound: f64,
) -> bool {
    let free: Vec<usize> = (0..cols.len()).filter(|k| !zero.contains(k)).collect();
    let mut step = DVector::zeros(cols.len());
    for &k in zero {
        step[k] = -beta[cols[k]];
    }
    if !free.is_empty() {
        let sub = jac.select_rows(&free).select_columns(&free);
        let coupling = jac.select_rows(&free) * &step;
        let b = DVector::from_fn(free.len(), |r, _| rhs[free[r]] - coupling[r]);
        match sub.cholesky() {
            Some(chol) => {
                let d = chol.solve(&b);
                for (r, &k) in free.iter().enumerate() {
                    step[k] = d[r];
                }
            }
            None => return false,
        }
    }
    let moved = info * &step;
    zero.iter().all(|&k| (score[k] - moved[k]).abs() <= bound)
}

enum Step {
    Update(DVector<f64>),
    /// Positions whose coefficient satisfies the zero optimality condition.
    Zero(Vec<usize>),
}

/// One update of the penalized equations. Fisher scoring on the exact SCAD
/// equations is tried first. When that step moves coefficients through zero,
/// those passing the coordinatewise optimality check at zero are set to zero;
/// otherwise, or when the scoring matrix is not positive definite, the local
/// quadratic approximation step is taken.
fn penalized_step(
    info: &DMatrix<f64>,
    score: &DVector<f64>,
    beta: &DVector<f64>,
    cols: &[usize],
    tuning: f64,
    n: f64,
) -> Result<Step> {
    if tuning == 0.0 {
        return solve_spd(info.clone(), score).map(Step::Update);
    }
    let penalized: Vec<usize> = (0..cols.len()).filter(|&k| cols[k] > 0).collect();
    let mut jac = info.clone();
    let mut rhs = score.clone();
    for &k in &penalized {
        let b = beta[cols[k]];
        let theta = b.abs();
        rhs[k] -= n * scad_derivative(theta, tuning) * b.signum();
        if theta > tuning && theta < SCAD_A * tuning {
            jac[(k, k)] -= n / (SCAD_A - 1.0);
        }
    }
    if let Some(chol) = jac.clone().cholesky() {
        let step = chol.solve(&rhs);
        let crossing: Vec<usize> = penalized
            .iter()
            .copied()
            .filter(|&k| (beta[cols[k]] + step[k]) * beta[cols[k]] <= 0.0)
            .collect();
        if crossing.is_empty() {
            return Ok(Step::Update(step));
        }
        if zero_is_optimal(info, score, &jac, &rhs, beta, cols, &crossing, n * tuning) {
            return Ok(Step::Zero(crossing));
        }
    }
    let mut lqa = info.clone();
    let mut rhs = score.clone();
    for &k in &penalized {
        let b = beta[cols[k]];
        let e = scad_derivative(b, tuning) / (LQA_EPS + b.abs());
        lqa[(k, k)] += n * e;
        rhs[k] -= n * e * b;
    }
    solve_spd(lqa, &rhs).map(Step::Update)
}

fn gee_core(
    data: &PanelDataset,
    cand: &CandidateModel,
    tuning: f64,
    init: Option<&DVector<f64>>,
) -> Result<FitResult> {
    let t = data.n_times();
    if t < 2 {
        return Err(ElcicError::InvalidInput("GEE fitting needs T >= 2".into()));
    }
    if cand.n_covariates() != data.n_covariates() {
        return Err(ElcicError::InvalidInput(format!(
            "candidate has {} covariates, data has {}",
            cand.n_covariates(),
            data.n_covariates()
        )));
    }
    if !(tuning >= 0.0) || !tuning.is_finite() {
        return Err(ElcicError::InvalidInput(format!("tuning must be non-negative, got {tuning}")));
    }
    let n = data.n() as f64;
    let l = data.n_covariates();
    let cols = cand.included();
    let p_mean = cand.mean_params();
    let mut beta = match init {
        Some(b) if b.len() == l => DVector::from_fn(l, |j, _| if cand.mask()[j] { b[j] } else { 0.0 }),
        Some(b) => {
            return Err(ElcicError::InvalidInput(format!(
                "starting values have length {}, expected {l}",
                b.len()
            )))
        }
        None => {
            let (x, y) = stacked(data, &cols);
            expand(&irls(cand.family(), &x, &y, None, GEE_MAX_ITER)?.beta, &cols, l)
        }
    };

    let mut active = cand.mask().to_vec();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < GEE_MAX_ITER {
        iterations += 1;
        let live: Vec<usize> = cols.iter().copied().filter(|&j| active[j]).collect();
        let units = unit_moments(data, cand, &beta)?;
        let (phi, rho) = moment_estimates(&units, cand.corr(), t, p_mean)?;
        let params = GeeParams {
            beta: beta.clone(),
            rho,
            phi,
        };
        let (info, score) = assemble(&units, &params, &live)?;
        let mut dropped = false;
        let delta = match penalized_step(&info, &score, &beta, &live, tuning, n)? {
            Step::Update(delta) => delta,
            Step::Zero(ks) => {
                for k in ks {
                    beta[live[k]] = 0.0;
                    active[live[k]] = false;
                }
                continue;
            }
        };
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(ElcicError::Diverged { iterations });
        }
        for (k, &j) in live.iter().enumerate() {
            beta[j] += delta[k];
        }
        if tuning > 0.0 {
            for &j in live.iter().filter(|&&j| j > 0) {
                if beta[j].abs() < ZERO_THRESHOLD {
                    beta[j] = 0.0;
                    active[j] = false;
                    dropped = true;
                }
            }
        }
        if !dropped && delta.amax() < FIT_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ElcicError::Diverged { iterations });
    }

    let support = active;
    let cols: Vec<usize> = cols.iter().copied().filter(|&j| support[j]).collect();
    let units = unit_moments(data, cand, &beta)?;
    let (phi, rho) = moment_estimates(&units, cand.corr(), t, p_mean)?;
    let params = GeeParams { beta, rho, phi };
    let (_, mut score) = assemble(&units, &params, &cols)?;
    for (k, &j) in cols.iter().enumerate() {
        if j > 0 && tuning > 0.0 {
            score[k] -= n * scad_derivative(params.beta[j], tuning) * params.beta[j].signum();
        }
    }
    Ok(FitResult {
        kind: EquationKind::Gee,
        params,
        support,
        converged,
        iterations,
        score_norm: score.norm() / n,
        nuisance: None,
        tuning: (tuning > 0.0).then_some(tuning),
    })
}

/// Marginal-model fit by Fisher scoring with moment estimates of the
/// dispersion and working correlation.
pub fn fit_gee(data: &PanelDataset, cand: &CandidateModel) -> Result<FitResult> {
    gee_core(data, cand, 0.0, None)
}

/// SCAD-penalized GEE on the covariates of `cand` (usually the full design),
/// solved by iterated local quadratic approximation. Coefficients that end
/// below [`ZERO_THRESHOLD`] are set to zero and dropped from `support`.
pub fn fit_pgee(data: &PanelDataset, cand: &CandidateModel, tuning: f64) -> Result<FitResult> {
    gee_core(data, cand, tuning, None)
}

/// [`fit_pgee`] started from the given coefficients.
pub fn fit_pgee_from(data: &PanelDataset, cand: &CandidateModel, tuning: f64, init: &DVector<f64>) -> Result<FitResult> {
    gee_core(data, cand, tuning, Some(init))
}
