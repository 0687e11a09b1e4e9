use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::elcic_from_fit;
use crate::error::{ElcicError, Result};
use crate::estimating_equations::{padded_beta, CandidateModel, CorrStructure, PanelDataset};
use crate::model_fitting::{fit_pgee, fit_pgee_from, FitResult};

pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TuningCriterion {
    #[serde(rename = "ELCIC")]
    Elcic,
    #[serde(rename = "CV")]
    Cv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningSelection {
    pub tuning: f64,
    pub corr: CorrStructure,
    pub fit: FitResult,
    /// Candidate induced by the selected fit's support.
    pub candidate: CandidateModel,
    pub value: f64,
    /// Criterion value at every grid point, `+inf` where the fit failed.
    pub path: Vec<f64>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(ElcicError::InvalidInput("tuning grid is empty".into()));
    }
    if grid.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(ElcicError::InvalidInput("tuning values must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ElcicError::InvalidInput("tuning grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Fits the penalized path with warm starts, returning per-point outcomes.
fn pgee_path(data: &PanelDataset, base: &CandidateModel, grid: &[f64]) -> Vec<Result<FitResult>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut warm: Option<DVector<f64>> = None;
    for &lambda in grid {
        let fit = match &warm {
            Some(b) => fit_pgee_from(data, base, lambda, b),
            None => fit_pgee(data, base, lambda),
        };
        if let Ok(f) = &fit {
            warm = Some(f.params.beta.clone());
        }
        out.push(fit);
    }
    out
}

fn induced(base: &CandidateModel, fit: &FitResult, n_times: usize) -> Result<CandidateModel> {
    base.with_mask(fit.support.clone(), n_times)
}

struct Scored {
    values: Vec<f64>,
    fits: Vec<Option<FitResult>>,
    errors: Vec<String>,
}

fn elcic_path(data: &PanelDataset, base: &CandidateModel, grid: &[f64]) -> Scored {
    let mut scored = Scored {
        values: Vec::with_capacity(grid.len()),
        fits: Vec::with_capacity(grid.len()),
        errors: Vec::new(),
    };
    for (lambda, fit) in grid.iter().zip(pgee_path(data, base, grid)) {
        let outcome = fit.and_then(|f| {
            let cand = induced(base, &f, data.n_times())?;
            let v = elcic_from_fit(data, &cand, &f)?;
            Ok((v.elcic, f))
        });
        match outcome {
            Ok((v, f)) => {
                scored.values.push(v);
                scored.fits.push(Some(f));
            }
            Err(e) => {
                scored.errors.push(format!("{} lambda={lambda}: {e}", base.corr()));
                scored.values.push(f64::INFINITY);
                scored.fits.push(None);
            }
        }
    }
    scored
}

fn squared_error(data: &PanelDataset, units: &[usize], cand: &CandidateModel, beta: &DVector<f64>) -> Result<f64> {
    let beta = padded_beta(cand, beta);
    let mut total = 0.0;
    for &i in units {
        let x = data.unit_design(i);
        for j in data.observed_times(i) {
            let mu = cand.family().mean(x.row(j).transpose().dot(&beta))?;
            total += (data.y(i, j) - mu).powi(2);
        }
    }
    Ok(total)
}

fn cv_path(data: &PanelDataset, base: &CandidateModel, grid: &[f64]) -> Result<Scored> {
    let n = data.n();
    if n < CV_FOLDS {
        return Err(ElcicError::InvalidInput(format!("cross-validation needs at least {CV_FOLDS} units")));
    }
    let mut values = vec![0.0; grid.len()];
    let mut errors = Vec::new();
    for fold in 0..CV_FOLDS {
        let train: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS == fold).collect();
        let train_data = data.subset(&train)?;
        for (k, fit) in pgee_path(&train_data, base, grid).into_iter().enumerate() {
            match fit.and_then(|f| squared_error(data, &test, base, &f.params.beta)) {
                Ok(se) => values[k] += se,
                Err(e) => {
                    errors.push(format!("fold {fold} lambda={}: {e}", grid[k]));
                    values[k] = f64::INFINITY;
                }
            }
        }
    }
    let mut fits = Vec::with_capacity(grid.len());
    for (k, fit) in pgee_path(data, base, grid).into_iter().enumerate() {
        match fit {
            Ok(f) => fits.push(Some(f)),
            Err(e) => {
                errors.push(format!("full data lambda={}: {e}", grid[k]));
                values[k] = f64::INFINITY;
                fits.push(None);
            }
        }
    }
    Ok(Scored { values, fits, errors })
}

fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < values[b]) {
            best = Some(k);
        }
    }
    best
}

/// Chooses the SCAD tuning level for the penalized fit of `base` (usually
/// the full design) by minimum ELCIC of the induced sparse model, or by
/// `CV_FOLDS`-fold cluster cross-validation of squared prediction error.
/// Folds assign unit `i` to fold `i mod CV_FOLDS`.
pub fn select_tuning(
    data: &PanelDataset,
    base: &CandidateModel,
    grid: &[f64],
    criterion: TuningCriterion,
) -> Result<TuningSelection> {
    check_grid(grid)?;
    let scored = match criterion {
        TuningCriterion::Elcic => elcic_path(data, base, grid),
        TuningCriterion::Cv => cv_path(data, base, grid)?,
    };
    let k = argmin(&scored.values).ok_or_else(|| ElcicError::AllGridFailed(scored.errors.clone()))?;
    let fit = scored.fits[k].clone().ok_or_else(|| ElcicError::AllGridFailed(scored.errors.clone()))?;
    Ok(TuningSelection {
        tuning: grid[k],
        corr: base.corr(),
        candidate: induced(base, &fit, data.n_times())?,
        fit,
        value: scored.values[k],
        path: scored.values,
    })
}

/// ELCIC minimized jointly over tuning levels and working structures. The
/// returned `path` lists the values structure by structure.
pub fn select_tuning_joint(
    data: &PanelDataset,
    base: &CandidateModel,
    grid: &[f64],
    structures: &[CorrStructure],
) -> Result<TuningSelection> {
    check_grid(grid)?;
    if structures.is_empty() {
        return Err(ElcicError::InvalidInput("no working structures given".into()));
    }
    let mut values = Vec::new();
    let mut fits = Vec::new();
    let mut errors = Vec::new();
    let mut owners = Vec::new();
    for &corr in structures {
        let cand = base.with_corr(corr, data.n_times())?;
        let scored = elcic_path(data, &cand, grid);
        values.extend(scored.values);
        fits.extend(scored.fits);
        errors.extend(scored.errors);
        owners.extend(grid.iter().map(|&g| (g, cand.clone())));
    }
    let k = argmin(&values).ok_or(ElcicError::AllGridFailed(errors))?;
    let fit = fits[k].clone().ok_or(ElcicError::InvalidInput("missing fit".into()))?;
    let (tuning, cand) = &owners[k];
    Ok(TuningSelection {
        tuning: *tuning,
        corr: cand.corr(),
        candidate: induced(cand, &fit, data.n_times())?,
        fit,
        value: values[k],
        path: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.2, 0.1]).is_err());
        assert!(check_grid(&[0.1, f64::NAN]).is_err());
        assert!(check_grid(&[0.05, 0.1]).is_ok());
    }

    #[test]
    fn argmin_skips_failures_and_keeps_first() {
        assert_eq!(argmin(&[f64::INFINITY, 2.0, 1.0, 1.0]), Some(2));
        assert_eq!(argmin(&[f64::INFINITY]), None);
    }
}
