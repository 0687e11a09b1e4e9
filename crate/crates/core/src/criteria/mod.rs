//! ELCIC, the classical comparators, ranking, tuning selection and the
//! limiting-distribution diagnostic.

mod comparators;
mod diagnostic;
mod tuning;

pub use comparators::{aic_bic_gic, qic_family, LikelihoodCriteria, QuasiCriteria};
pub use diagnostic::{asymptotic_diagnostic, weighted_chi2, AsymptoticDiagnostic, JACOBIAN_STEP};
pub use tuning::{select_tuning, select_tuning_joint, TuningCriterion, TuningSelection, CV_FOLDS};

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::el_core::solve_lagrange_default;
use crate::error::{ElcicError, Result};
use crate::estimating_equations::{build_score_matrix, CandidateModel, Family, PanelDataset};
use crate::model_fitting::{fit_candidate, FitResult, Framework};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "ELCIC")]
    Elcic,
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "GIC")]
    Gic,
    #[serde(rename = "QIC")]
    Qic,
    #[serde(rename = "QIC_B")]
    QicB,
    #[serde(rename = "CIC")]
    Cic,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Elcic,
        Criterion::Aic,
        Criterion::Bic,
        Criterion::Gic,
        Criterion::Qic,
        Criterion::QicB,
        Criterion::Cic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Criterion::Elcic => "ELCIC",
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
            Criterion::Gic => "GIC",
            Criterion::Qic => "QIC",
            Criterion::QicB => "QIC_B",
            Criterion::Cic => "CIC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '/'], "_");
        Criterion::ALL
            .into_iter()
            .find(|c| c.label().to_ascii_lowercase() == key)
            .or(match key.as_str() {
                "qicb" | "qic_bic" => Some(Criterion::QicB),
                _ => None,
            })
    }

    fn likelihood_based(self) -> bool {
        matches!(self, Criterion::Aic | Criterion::Bic | Criterion::Gic)
    }

    fn quasi_based(self) -> bool {
        matches!(self, Criterion::Qic | Criterion::QicB | Criterion::Cic)
    }

    /// Whether the comparator is defined for this framework and family.
    pub fn supports(self, framework: &Framework, family: Family) -> bool {
        match self {
            Criterion::Elcic => true,
            c if c.likelihood_based() => {
                *framework == Framework::Glm && matches!(family, Family::PoissonLog | Family::BinomialLogit)
            }
            _ => *framework == Framework::Gee,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Criterion values of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub candidate: CandidateModel,
    pub elcic: f64,
    pub log_el: f64,
    pub p: usize,
    /// Comparators supported by the candidate's family.
    pub comparators: BTreeMap<Criterion, f64>,
    pub hull_flag: bool,
    /// Set when fitting or scoring failed; every value is then `+inf`.
    pub error: Option<ElcicError>,
}

impl CriterionReport {
    fn failed(candidate: &CandidateModel, error: ElcicError) -> Self {
        Self {
            candidate: candidate.clone(),
            elcic: f64::INFINITY,
            log_el: f64::INFINITY,
            p: candidate.p(),
            comparators: BTreeMap::new(),
            hull_flag: false,
            error: Some(error),
        }
    }

    /// Value under `criterion`, `+inf` when unavailable.
    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Elcic => self.elcic,
            c => self.comparators.get(&c).copied().unwrap_or(f64::INFINITY),
        }
    }
}

/// Empirical log-likelihood ratio statistic at a given fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElcicValue {
    pub log_el: f64,
    pub elcic: f64,
    pub hull_flag: bool,
}

/// `2 l + p log n` for the candidate at an existing fit.
pub fn elcic_from_fit(data: &PanelDataset, cand: &CandidateModel, fit: &FitResult) -> Result<ElcicValue> {
    let g = build_score_matrix(data, cand, fit)?;
    let sol = solve_lagrange_default(&g)?;
    let log_el = sol.log_el;
    Ok(ElcicValue {
        log_el,
        elcic: 2.0 * log_el + cand.p() as f64 * (data.n() as f64).ln(),
        hull_flag: sol.hull_flag,
    })
}

/// Fits the candidate and returns its ELCIC.
pub fn elcic(data: &PanelDataset, cand: &CandidateModel, framework: &Framework) -> Result<ElcicValue> {
    let fit = fit_candidate(data, cand, framework)?;
    elcic_from_fit(data, cand, &fit)
}

/// Fits the candidate once and computes ELCIC plus every requested comparator
/// the family supports. Failures are recorded in the report, not returned.
pub fn evaluate_candidate(
    data: &PanelDataset,
    cand: &CandidateModel,
    framework: &Framework,
    criteria: &[Criterion],
) -> CriterionReport {
    let fit = match fit_candidate(data, cand, framework) {
        Ok(f) => f,
        Err(e) => return CriterionReport::failed(cand, e),
    };
    let value = match elcic_from_fit(data, cand, &fit) {
        Ok(v) => v,
        Err(e) => return CriterionReport::failed(cand, e),
    };
    let mut comparators = BTreeMap::new();
    let wanted = |pred: fn(Criterion) -> bool| {
        criteria
            .iter()
            .any(|&c| pred(c) && c.supports(framework, cand.family()))
    };
    if wanted(Criterion::likelihood_based) {
        match comparators::likelihood_from_fit(data, cand, &fit) {
            Ok(v) => {
                comparators.insert(Criterion::Aic, v.aic);
                comparators.insert(Criterion::Bic, v.bic);
                comparators.insert(Criterion::Gic, v.gic);
            }
            Err(e) => return CriterionReport::failed(cand, e),
        }
    }
    if wanted(Criterion::quasi_based) {
        match comparators::quasi_from_fit(data, cand, &fit) {
            Ok(v) => {
                comparators.insert(Criterion::Qic, v.qic);
                comparators.insert(Criterion::QicB, v.qic_b);
                comparators.insert(Criterion::Cic, v.cic);
            }
            Err(e) => return CriterionReport::failed(cand, e),
        }
    }
    comparators.retain(|c, _| criteria.contains(c));
    CriterionReport {
        candidate: cand.clone(),
        elcic: value.elcic,
        log_el: value.log_el,
        p: cand.p(),
        comparators,
        hull_flag: value.hull_flag,
        error: None,
    }
}

/// Evaluates every candidate, in parallel, preserving declaration order.
pub fn evaluate_candidates(
    data: &PanelDataset,
    candidates: &[CandidateModel],
    framework: &Framework,
    criteria: &[Criterion],
) -> Result<Vec<CriterionReport>> {
    if candidates.is_empty() {
        return Err(ElcicError::EmptyCandidates);
    }
    Ok(candidates
        .par_iter()
        .map(|c| evaluate_candidate(data, c, framework, criteria))
        .collect())
}

/// Indices of `reports` in ascending order of `criterion`; ties go to the
/// smaller `p`, then to the earlier declaration.
pub fn rank(reports: &[CriterionReport], criterion: Criterion) -> Vec<usize> {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (reports[a].value(criterion), reports[b].value(criterion));
        va.total_cmp(&vb)
            .then(reports[a].p.cmp(&reports[b].p))
            .then(a.cmp(&b))
    });
    order
}

/// Index of the winner under `criterion`.
pub fn winner(reports: &[CriterionReport], criterion: Criterion) -> Option<usize> {
    rank(reports, criterion).first().copied()
}

/// Evaluates and sorts the candidates; the winner comes first.
pub fn select_model(
    data: &PanelDataset,
    candidates: &[CandidateModel],
    framework: &Framework,
    criterion: Criterion,
) -> Result<Vec<CriterionReport>> {
    if let Some(c) = candidates.first() {
        if !criterion.supports(framework, c.family()) {
            return Err(ElcicError::UnsupportedFamily(format!(
                "{criterion} is not defined for {} {:?} fits",
                c.family().name(),
                framework.kind()
            )));
        }
    }
    let reports = evaluate_candidates(data, candidates, framework, &[criterion])?;
    let order = rank(&reports, criterion);
    let mut slots: Vec<Option<CriterionReport>> = reports.into_iter().map(Some).collect();
    Ok(order.into_iter().filter_map(|i| slots[i].take()).collect())
}

/// Two-stage rule: `CIC` picks the working structure among candidates with
/// the full mean model, then `stage2` picks the mean model within that
/// structure.
pub fn two_stage(reports: &[CriterionReport], stage2: Criterion) -> Option<usize> {
    let full = reports.iter().map(|r| r.candidate.mean_params()).max()?;
    let stage1: Vec<usize> = (0..reports.len())
        .filter(|&i| reports[i].candidate.mean_params() == full)
        .collect();
    let sub: Vec<CriterionReport> = stage1.iter().map(|&i| reports[i].clone()).collect();
    let corr = reports[stage1[winner(&sub, Criterion::Cic)?]].candidate.corr();
    let within: Vec<usize> = (0..reports.len())
        .filter(|&i| reports[i].candidate.corr() == corr)
        .collect();
    let sub: Vec<CriterionReport> = within.iter().map(|&i| reports[i].clone()).collect();
    winner(&sub, stage2).map(|k| within[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimating_equations::CorrStructure;

    fn report(p: usize, value: f64) -> CriterionReport {
        let mask = vec![true; p];
        let cand = CandidateModel::new(mask, CorrStructure::Independence, Family::PoissonLog, 1).unwrap();
        CriterionReport {
            p,
            elcic: value,
            log_el: 0.0,
            candidate: cand,
            comparators: BTreeMap::new(),
            hull_flag: false,
            error: None,
        }
    }

    #[test]
    fn ties_prefer_small_p_then_declaration() {
        let r = vec![report(3, 1.0), report(2, 1.0), report(2, 1.0), report(1, 0.5)];
        assert_eq!(rank(&r, Criterion::Elcic), vec![3, 1, 2, 0]);
    }

    #[test]
    fn failures_rank_last() {
        let mut r = vec![report(1, 5.0), report(2, 1.0)];
        r[1] = CriterionReport::failed(&r[1].candidate, ElcicError::SingularHessian);
        assert_eq!(winner(&r, Criterion::Elcic), Some(0));
    }

    #[test]
    fn constant_shift_keeps_ranking() {
        let r: Vec<CriterionReport> = [3.0, 1.0, 2.5, 7.0].iter().enumerate().map(|(k, &v)| report(k + 1, v)).collect();
        let shifted: Vec<CriterionReport> = r
            .iter()
            .map(|x| {
                let mut y = x.clone();
                y.elcic += 12.5;
                y
            })
            .collect();
        assert_eq!(rank(&r, Criterion::Elcic), rank(&shifted, Criterion::Elcic));
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(Criterion::parse(c.label()), Some(c));
        }
        assert_eq!(Criterion::parse("qic/b"), Some(Criterion::QicB));
    }
}
