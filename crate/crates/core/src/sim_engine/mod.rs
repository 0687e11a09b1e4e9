//! Monte Carlo designs and replicated selection experiments.

pub mod copula;
mod generate;

pub use generate::{ar1_matrix, draw_count, exchangeable_matrix, gen_aipw, gen_case1, gen_case2, gen_case3};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    asymptotic_diagnostic, evaluate_candidates, select_tuning, select_tuning_joint, two_stage, winner, Criterion,
    CriterionReport, TuningCriterion, TuningSelection,
};
use crate::error::{ElcicError, Result};
use crate::estimating_equations::{CandidateModel, CorrStructure, Family, PanelDataset};
use crate::model_fitting::{fit_candidate, Framework, NuisanceSpec};

pub const DEFAULT_REPS: usize = 500;
pub const DEFAULT_SEED: u64 = 20240101;
/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimCase {
    #[serde(rename = "GLM_COUNT")]
    GlmCount,
    #[serde(rename = "GEE_COUNT")]
    GeeCount,
    #[serde(rename = "PGEE_GAUSS")]
    PgeeGauss,
    #[serde(rename = "AIPW_LINEAR")]
    AipwLinear,
}

impl SimCase {
    pub fn label(self) -> &'static str {
        match self {
            SimCase::GlmCount => "case1",
            SimCase::GeeCount => "case2",
            SimCase::PgeeGauss => "case3",
            SimCase::AipwLinear => "aipw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "case1" | "glm_count" => Some(SimCase::GlmCount),
            "case2" | "gee_count" => Some(SimCase::GeeCount),
            "case3" | "pgee_gauss" => Some(SimCase::PgeeGauss),
            "aipw" | "aipw_linear" => Some(SimCase::AipwLinear),
            _ => None,
        }
    }

    pub fn longitudinal(self) -> bool {
        matches!(self, SimCase::GeeCount | SimCase::PgeeGauss)
    }
}

impl fmt::Display for SimCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum OutcomeDist {
    Poisson,
    /// Negative binomial with mean `mu` and variance `mu + mu^2 / k`.
    NegBin {
        k: f64,
    },
    Gaussian,
}

impl OutcomeDist {
    pub fn label(self) -> String {
        match self {
            OutcomeDist::Poisson => "poisson".into(),
            OutcomeDist::NegBin { k } => format!("nb{k}"),
            OutcomeDist::Gaussian => "gaussian".into(),
        }
    }
}

/// True data-generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Mean coefficients including the intercept, in design-column order.
    pub beta: Vec<f64>,
    /// Exchangeable within-unit correlation.
    pub rho: f64,
    /// Error variance (Gaussian designs).
    pub phi: f64,
    pub outcome: OutcomeDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub case: SimCase,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub truth: Truth,
    pub reps: usize,
    pub seed: u64,
}

impl SimDesign {
    fn with_truth(case: SimCase, n: usize, t: usize, truth: Truth) -> Self {
        Self {
            case,
            n,
            t,
            truth,
            reps: DEFAULT_REPS,
            seed: DEFAULT_SEED,
        }
    }

    /// Cross-sectional counts, `beta = (0.5; 0.5, 0.5, 0)`.
    pub fn case1(n: usize, outcome: OutcomeDist) -> Self {
        let truth = Truth {
            beta: vec![0.5, 0.5, 0.5, 0.0],
            rho: 0.0,
            phi: 1.0,
            outcome,
        };
        Self::with_truth(SimCase::GlmCount, n, 1, truth)
    }

    /// Longitudinal counts, `beta = (-1; 1, 0.5, 0)`, exchangeable 0.5.
    pub fn case2(n: usize, t: usize) -> Self {
        let truth = Truth {
            beta: vec![-1.0, 1.0, 0.5, 0.0],
            rho: 0.5,
            phi: 1.0,
            outcome: OutcomeDist::Poisson,
        };
        Self::with_truth(SimCase::GeeCount, n, t, truth)
    }

    /// Gaussian panel with seven covariates, `T = 3`; the intercept column
    /// carries a zero coefficient.
    pub fn case3(n: usize) -> Self {
        let truth = Truth {
            beta: vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            rho: 0.5,
            phi: 1.0,
            outcome: OutcomeDist::Gaussian,
        };
        Self::with_truth(SimCase::PgeeGauss, n, 3, truth)
    }

    /// Linear outcome with missingness, design `(1, x1..x4, s3, s4)`.
    pub fn aipw(n: usize) -> Self {
        let truth = Truth {
            beta: vec![1.0, 1.0, 2.0, 1.0, 1.0, 0.0, 0.0],
            rho: 0.0,
            phi: 1.0,
            outcome: OutcomeDist::Gaussian,
        };
        Self::with_truth(SimCase::AipwLinear, n, 1, truth)
    }

    /// Default design of a case at the given size. `t` is ignored for
    /// cross-sectional cases.
    pub fn for_case(case: SimCase, n: usize, t: usize) -> Self {
        match case {
            SimCase::GlmCount => Self::case1(n, OutcomeDist::Poisson),
            SimCase::GeeCount => Self::case2(n, t),
            SimCase::PgeeGauss => {
                let mut d = Self::case3(n);
                d.t = t;
                d
            }
            SimCase::AipwLinear => Self::aipw(n),
        }
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ElcicError::InvalidInput(m));
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if self.n < 10 {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        let expected_len = match self.case {
            SimCase::GlmCount | SimCase::GeeCount => 4,
            SimCase::PgeeGauss => 8,
            SimCase::AipwLinear => 7,
        };
        if self.truth.beta.len() != expected_len {
            return bad(format!(
                "{} needs {expected_len} true coefficients, got {}",
                self.case,
                self.truth.beta.len()
            ));
        }
        match self.case {
            SimCase::GlmCount | SimCase::AipwLinear if self.t != 1 => {
                bad(format!("{} is cross-sectional and needs T = 1, got {}", self.case, self.t))
            }
            SimCase::GeeCount | SimCase::PgeeGauss if self.t < 2 => {
                bad(format!("{} is longitudinal and needs T >= 2, got {}", self.case, self.t))
            }
            _ => Ok(()),
        }
    }

    /// Independent random stream of replicate `rep`.
    pub fn rng(&self, rep: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep);
        rng
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let tail: Vec<&str> = match self.case {
            SimCase::GlmCount | SimCase::GeeCount => vec!["x1", "x2", "x3"],
            SimCase::PgeeGauss => vec!["x1", "x2", "x3", "x4", "x5", "x6", "x7"],
            SimCase::AipwLinear => vec!["x1", "x2", "x3", "x4", "s3", "s4"],
        };
        std::iter::once("intercept").chain(tail).map(String::from).collect()
    }

    pub fn family(&self) -> Family {
        match self.case {
            SimCase::GlmCount | SimCase::GeeCount => Family::PoissonLog,
            SimCase::PgeeGauss | SimCase::AipwLinear => Family::GaussianIdentity,
        }
    }

    /// Support of the true mean model; the intercept is always included.
    pub fn truth_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> = self.truth.beta.iter().map(|b| *b != 0.0).collect();
        mask[0] = true;
        mask
    }

    pub fn truth_corr(&self) -> CorrStructure {
        if self.case.longitudinal() && self.truth.rho != 0.0 {
            CorrStructure::Exchangeable
        } else {
            CorrStructure::Independence
        }
    }

    pub fn truth_label(&self) -> String {
        let cand = CandidateModel::new(self.truth_mask(), self.truth_corr(), self.family(), self.t)
            .map(|c| c.label(&self.covariate_names(), self.case.longitudinal()));
        cand.unwrap_or_default()
    }

    pub fn generate(&self, rep: u64) -> Result<PanelDataset> {
        match self.case {
            SimCase::GlmCount => gen_case1(self, rep),
            SimCase::GeeCount => gen_case2(self, rep),
            SimCase::PgeeGauss => gen_case3(self, rep),
            SimCase::AipwLinear => gen_aipw(self, rep),
        }
    }

    /// Candidate grid of the case, in table column order.
    pub fn candidates(&self) -> Result<Vec<CandidateModel>> {
        let l = self.truth.beta.len();
        let family = self.family();
        let build = |cols: &[usize], corr: CorrStructure| {
            let mut mask = vec![false; l];
            mask[0] = true;
            for &c in cols {
                mask[c] = true;
            }
            CandidateModel::new(mask, corr, family, self.t)
        };
        match self.case {
            SimCase::GlmCount => [&[1][..], &[2], &[3], &[1, 2], &[1, 3], &[2, 3], &[1, 2, 3]]
                .iter()
                .map(|c| build(c, CorrStructure::Independence))
                .collect(),
            SimCase::GeeCount => {
                let means: [&[usize]; 6] = [&[1, 2, 3], &[1, 2], &[1, 3], &[2, 3], &[1], &[3]];
                [CorrStructure::Exchangeable, CorrStructure::Ar1, CorrStructure::Independence]
                    .iter()
                    .flat_map(|&corr| means.iter().map(move |m| (m, corr)))
                    .map(|(m, corr)| build(m, corr))
                    .collect()
            }
            SimCase::PgeeGauss => Ok(vec![build(&(1..l).collect::<Vec<_>>(), CorrStructure::Exchangeable)?]),
            SimCase::AipwLinear => [
                &[1, 2][..],
                &[1, 2, 3],
                &[1, 2, 3, 5],
                &[1, 2, 3, 4],
                &[1, 2, 3, 4, 5],
                &[1, 2, 3, 4, 6],
                &[1, 2, 3, 4, 5, 6],
            ]
            .iter()
            .map(|c| build(c, CorrStructure::Independence))
            .collect(),
        }
    }
}

/// Default SCAD tuning grid of the penalized design.
pub fn default_tuning_grid() -> Vec<f64> {
    (1..=20).map(|k| 0.02 * k as f64).collect()
}

/// A selection rule applied to every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Procedure {
    /// Minimum of one criterion over the candidate grid.
    Select(Criterion),
    /// CIC picks the working structure under the full mean, then the
    /// criterion picks the mean model.
    TwoStage(Criterion),
    /// Tuning selection for the penalized fit under the true structure.
    Tuning(TuningCriterion),
    /// ELCIC over tuning levels and working structures jointly.
    TuningJoint,
    /// ELCIC over the candidate grid with AIPW rows.
    Aipw {
        missingness: NuisanceSpec,
        imputation: NuisanceSpec,
    },
}

impl Procedure {
    pub fn label(&self) -> String {
        match self {
            Procedure::Select(c) => c.label().to_string(),
            Procedure::TwoStage(Criterion::QicB) => "QIC/b".into(),
            Procedure::TwoStage(c) => c.label().to_string(),
            Procedure::Tuning(TuningCriterion::Elcic) => "ELCIC1".into(),
            Procedure::Tuning(TuningCriterion::Cv) => "CV".into(),
            Procedure::TuningJoint => "ELCIC2".into(),
            Procedure::Aipw { missingness, imputation } => {
                let tag = |s: &NuisanceSpec| if *s == NuisanceSpec::Correct { "C" } else { "M" };
                format!("P{}_I{}", tag(missingness), tag(imputation))
            }
        }
    }

    /// Default procedures of each case.
    pub fn defaults(case: SimCase) -> Vec<Procedure> {
        use NuisanceSpec::{Correct, Misspecified};
        match case {
            SimCase::GlmCount => vec![
                Procedure::Select(Criterion::Aic),
                Procedure::Select(Criterion::Gic),
                Procedure::Select(Criterion::Bic),
                Procedure::Select(Criterion::Elcic),
            ],
            SimCase::GeeCount => vec![
                Procedure::Select(Criterion::Elcic),
                Procedure::TwoStage(Criterion::Qic),
                Procedure::TwoStage(Criterion::QicB),
            ],
            SimCase::PgeeGauss => vec![
                Procedure::Tuning(TuningCriterion::Cv),
                Procedure::Tuning(TuningCriterion::Elcic),
                Procedure::TuningJoint,
            ],
            SimCase::AipwLinear => vec![
                Procedure::Aipw { missingness: Correct, imputation: Correct },
                Procedure::Aipw { missingness: Correct, imputation: Misspecified },
                Procedure::Aipw { missingness: Misspecified, imputation: Correct },
            ],
        }
    }

    /// Parses a procedure name in the context of a case: `elcic`, `aic`,
    /// `bic`, `gic`, `qic`, `qic_b`, `cic`, `cv`, `elcic1`, `elcic2`,
    /// `pc_ic`, `pc_im`, `pm_ic`, `pm_im`.
    pub fn parse(name: &str, case: SimCase) -> Option<Self> {
        use NuisanceSpec::{Correct, Misspecified};
        let key = name.trim().to_ascii_lowercase().replace('/', "_");
        let aipw = |m, i| Procedure::Aipw { missingness: m, imputation: i };
        let proc = match (case, key.as_str()) {
            (SimCase::PgeeGauss, "cv") => Procedure::Tuning(TuningCriterion::Cv),
            (SimCase::PgeeGauss, "elcic1") | (SimCase::PgeeGauss, "elcic") => Procedure::Tuning(TuningCriterion::Elcic),
            (SimCase::PgeeGauss, "elcic2") => Procedure::TuningJoint,
            (SimCase::PgeeGauss, _) => return None,
            (SimCase::AipwLinear, "pc_ic") | (SimCase::AipwLinear, "elcic") => aipw(Correct, Correct),
            (SimCase::AipwLinear, "pc_im") => aipw(Correct, Misspecified),
            (SimCase::AipwLinear, "pm_ic") => aipw(Misspecified, Correct),
            (SimCase::AipwLinear, "pm_im") => aipw(Misspecified, Misspecified),
            (SimCase::AipwLinear, _) => return None,
            (SimCase::GeeCount, "qic") => Procedure::TwoStage(Criterion::Qic),
            (SimCase::GeeCount, "qic_b") | (SimCase::GeeCount, "qicb") => Procedure::TwoStage(Criterion::QicB),
            (SimCase::GeeCount, "cic") => Procedure::Select(Criterion::Cic),
            (SimCase::GeeCount, "elcic") => Procedure::Select(Criterion::Elcic),
            (SimCase::GeeCount, _) => return None,
            (SimCase::GlmCount, other) => match Criterion::parse(other)? {
                c @ (Criterion::Elcic | Criterion::Aic | Criterion::Bic | Criterion::Gic) => Procedure::Select(c),
                _ => return None,
            },
        };
        Some(proc)
    }

    fn criteria(&self) -> Vec<Criterion> {
        match self {
            Procedure::Select(c) => vec![*c],
            Procedure::TwoStage(c) => vec![Criterion::Cic, *c],
            _ => vec![],
        }
    }
}

/// Candidate grid, tuning grid and procedures of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub candidates: Vec<CandidateModel>,
    pub tuning_grid: Vec<f64>,
    pub procedures: Vec<Procedure>,
}

impl Experiment {
    pub fn default_for(design: &SimDesign) -> Result<Self> {
        Ok(Self {
            candidates: design.candidates()?,
            tuning_grid: default_tuning_grid(),
            procedures: Procedure::defaults(design.case),
        })
    }

    pub fn with_procedures(mut self, procedures: Vec<Procedure>) -> Self {
        self.procedures = procedures;
        self
    }
}

/// Per-replicate summary of a penalized selection.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TuningMetrics {
    ms: f64,
    fp: f64,
    exact: bool,
    over: bool,
    corr_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Pick {
    label: String,
    correct: bool,
    tuning: Option<TuningMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub procedure: String,
    pub candidate: String,
    pub count: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub procedure: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepFailure {
    pub rep: u64,
    pub message: String,
}

/// Selection rates and summary metrics of a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTable {
    pub design: SimDesign,
    pub truth: String,
    pub procedures: Vec<String>,
    /// Column order: the candidate grid, then any other selected models.
    pub candidates: Vec<String>,
    pub rates: Vec<RateRow>,
    pub metrics: Vec<MetricRow>,
    pub reps_used: usize,
    pub failures: Vec<RepFailure>,
}

impl SelectionTable {
    pub fn rate(&self, procedure: &str, candidate: &str) -> f64 {
        self.rates
            .iter()
            .find(|r| r.procedure == procedure && r.candidate == candidate)
            .map_or(0.0, |r| r.rate)
    }

    /// Rate at which `procedure` picked the true model.
    pub fn true_rate(&self, procedure: &str) -> f64 {
        self.rate(procedure, &self.truth)
    }

    pub fn metric(&self, procedure: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.procedure == procedure && m.metric == metric)
            .map(|m| m.value)
    }
}

fn framework_of(design: &SimDesign, proc: &Procedure) -> Framework {
    match proc {
        Procedure::Aipw { missingness, imputation } => Framework::Aipw {
            missingness: missingness.missingness(),
            imputation: imputation.imputation(),
        },
        _ => match design.case {
            SimCase::GlmCount | SimCase::AipwLinear => Framework::Glm,
            SimCase::GeeCount | SimCase::PgeeGauss => Framework::Gee,
        },
    }
}

fn pick_from(design: &SimDesign, cand: &CandidateModel, names: &[String]) -> Pick {
    let longitudinal = design.case.longitudinal();
    Pick {
        label: cand.label(names, longitudinal),
        correct: cand.mask() == design.truth_mask().as_slice() && (!longitudinal || cand.corr() == design.truth_corr()),
        tuning: None,
    }
}

fn tuning_pick(design: &SimDesign, sel: &TuningSelection, names: &[String]) -> Pick {
    let truth = design.truth_mask();
    let support = &sel.fit.support;
    let beta = &sel.fit.params.beta;
    let ms: f64 = (1..truth.len()).map(|j| (beta[j] - design.truth.beta[j]).powi(2)).sum();
    let fp = (1..truth.len()).filter(|&j| support[j] && !truth[j]).count() as f64;
    let covers = (1..truth.len()).all(|j| !truth[j] || support[j]);
    let exact = support.as_slice() == truth.as_slice();
    let mut pick = pick_from(design, &sel.candidate, names);
    pick.tuning = Some(TuningMetrics {
        ms,
        fp,
        exact,
        over: covers && !exact,
        corr_ok: sel.corr == design.truth_corr(),
    });
    pick
}

fn winner_of(reports: &[CriterionReport], proc: &Procedure) -> Result<usize> {
    let chosen = match proc {
        Procedure::TwoStage(c) => two_stage(reports, *c),
        Procedure::Select(_) | Procedure::Aipw { .. } if !reports.is_empty() => {
            let c = if let Procedure::Select(c) = proc { *c } else { Criterion::Elcic };
            if reports.iter().all(|r| !r.value(c).is_finite()) {
                let msgs: Vec<String> = reports
                    .iter()
                    .filter_map(|r| r.error.as_ref().map(|e| e.to_string()))
                    .collect();
                return Err(ElcicError::AllGridFailed(msgs));
            }
            winner(reports, c)
        }
        _ => None,
    };
    chosen.ok_or(ElcicError::EmptyCandidates)
}

fn run_rep(design: &SimDesign, exp: &Experiment, rep: u64) -> Result<Vec<Pick>> {
    let data = design.generate(rep)?;
    let names = design.covariate_names();
    let shared: Vec<Criterion> = {
        let set: BTreeSet<Criterion> = exp
            .procedures
            .iter()
            .filter(|p| matches!(p, Procedure::Select(_) | Procedure::TwoStage(_)))
            .flat_map(|p| p.criteria())
            .collect();
        set.into_iter().collect()
    };
    let shared_reports = if shared.is_empty() {
        None
    } else {
        let fw = framework_of(design, &Procedure::Select(Criterion::Elcic));
        Some(evaluate_candidates(&data, &exp.candidates, &fw, &shared)?)
    };
    let base = || -> Result<CandidateModel> {
        exp.candidates
            .first()
            .cloned()
            .ok_or(ElcicError::EmptyCandidates)
    };
    exp.procedures
        .iter()
        .map(|proc| match proc {
            Procedure::Select(_) | Procedure::TwoStage(_) => {
                let reports = shared_reports.as_ref().ok_or(ElcicError::EmptyCandidates)?;
                let k = winner_of(reports, proc)?;
                Ok(pick_from(design, &reports[k].candidate, &names))
            }
            Procedure::Aipw { .. } => {
                let reports = evaluate_candidates(&data, &exp.candidates, &framework_of(design, proc), &[])?;
                let k = winner_of(&reports, proc)?;
                Ok(pick_from(design, &reports[k].candidate, &names))
            }
            Procedure::Tuning(criterion) => {
                let base = base()?.with_corr(design.truth_corr(), design.t)?;
                let sel = select_tuning(&data, &base, &exp.tuning_grid, *criterion)?;
                Ok(tuning_pick(design, &sel, &names))
            }
            Procedure::TuningJoint => {
                let structures = [CorrStructure::Exchangeable, CorrStructure::Ar1, CorrStructure::Independence];
                let sel = select_tuning_joint(&data, &base()?, &exp.tuning_grid, &structures)?;
                Ok(tuning_pick(design, &sel, &names))
            }
        })
        .collect()
}

fn tuning_metrics(proc: &Procedure, picks: &[TuningMetrics]) -> Vec<(String, f64)> {
    let n = picks.len().max(1) as f64;
    let mean = |f: &dyn Fn(&TuningMetrics) -> f64| picks.iter().map(f).sum::<f64>() / n;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mut out = vec![
        ("MS".to_string(), mean(&|m| m.ms)),
        ("FP".to_string(), mean(&|m| m.fp)),
        ("OVS".to_string(), mean(&|m| flag(m.exact))),
        ("OVOS".to_string(), mean(&|m| flag(m.over))),
    ];
    if *proc == Procedure::TuningJoint {
        let cs = picks.iter().filter(|m| m.corr_ok).count();
        let vos = picks.iter().filter(|m| m.corr_ok && m.over).count();
        out.push(("CS".to_string(), mean(&|m| flag(m.corr_ok))));
        out.push(("JS".to_string(), mean(&|m| flag(m.corr_ok && m.exact))));
        out.push(("VOS".to_string(), if cs == 0 { 0.0 } else { vos as f64 / cs as f64 }));
    }
    out
}

/// Runs every replicate (in parallel on the current rayon pool) and
/// aggregates selection rates. Replicates that fail are excluded and
/// logged; more than [`MAX_FAILURE_RATE`] failures is an error.
pub fn run_mc(design: &SimDesign, exp: &Experiment) -> Result<SelectionTable> {
    design.validate()?;
    if exp.candidates.is_empty() {
        return Err(ElcicError::EmptyCandidates);
    }
    if exp.procedures.is_empty() {
        return Err(ElcicError::InvalidInput("no selection procedures requested".into()));
    }
    let outcomes: Vec<Result<Vec<Pick>>> = (0..design.reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(design, exp, rep))
        .collect();

    let mut failures = Vec::new();
    let mut picks = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(p) => picks.push(p),
            Err(e) => failures.push(RepFailure {
                rep: rep as u64,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * design.reps as f64 {
        return Err(ElcicError::TooManyFailures {
            failed: failures.len(),
            reps: design.reps,
        });
    }
    let reps_used = picks.len();
    let names = design.covariate_names();
    let mut columns: Vec<String> = exp
        .candidates
        .iter()
        .map(|c| c.label(&names, design.case.longitudinal()))
        .collect();
    let extra: BTreeSet<String> = picks
        .iter()
        .flatten()
        .map(|p| p.label.clone())
        .filter(|l| !columns.contains(l))
        .collect();
    columns.extend(extra);

    let mut rates = Vec::new();
    let mut metrics = Vec::new();
    for (k, proc) in exp.procedures.iter().enumerate() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for rep in &picks {
            *counts.entry(rep[k].label.as_str()).or_default() += 1;
        }
        for col in &columns {
            let count = counts.get(col.as_str()).copied().unwrap_or(0);
            rates.push(RateRow {
                procedure: proc.label(),
                candidate: col.clone(),
                count,
                rate: if reps_used == 0 { 0.0 } else { count as f64 / reps_used as f64 },
            });
        }
        let tm: Vec<TuningMetrics> = picks.iter().filter_map(|rep| rep[k].tuning).collect();
        if !tm.is_empty() {
            for (metric, value) in tuning_metrics(proc, &tm) {
                metrics.push(MetricRow {
                    procedure: proc.label(),
                    metric,
                    value,
                });
            }
        }
    }
    Ok(SelectionTable {
        design: design.clone(),
        truth: design.truth_label(),
        procedures: exp.procedures.iter().map(Procedure::label).collect(),
        candidates: columns,
        rates,
        metrics,
        reps_used,
        failures,
    })
}

/// Monte Carlo summary of the limiting-distribution diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticSummary {
    pub candidate: String,
    pub reps_used: usize,
    pub mean_2l: f64,
    pub p95_2l: f64,
    /// Average of `trace(Omega)` over replicates.
    pub mean_trace: f64,
    /// Average sorted eigenvalues of `Omega`.
    pub mean_eigenvalues: Vec<f64>,
    /// 95th percentile of `sum_j w_j chi2_1` at the average eigenvalues.
    pub p95_weighted_chi2: f64,
    pub failures: Vec<RepFailure>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Number of draws used to simulate the weighted chi-square quantile.
pub const CHI2_DRAWS: usize = 200_000;

/// Replicates `2 l` for `cand` and compares it with the weighted chi-square
/// limit estimated from each replicate's `Omega`.
pub fn run_diagnostic(design: &SimDesign, cand: &CandidateModel) -> Result<DiagnosticSummary> {
    design.validate()?;
    let framework = framework_of(design, &Procedure::Select(Criterion::Elcic));
    let outcomes: Vec<Result<(f64, Vec<f64>)>> = (0..design.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let data = design.generate(rep)?;
            let fit = fit_candidate(&data, cand, &framework)?;
            let diag = asymptotic_diagnostic(&data, cand, &fit)?;
            Ok((diag.empirical_mean_2l, diag.eigenvalues))
        })
        .collect();
    let mut failures = Vec::new();
    let mut stats = Vec::new();
    let mut eig_sum: Vec<f64> = Vec::new();
    let mut traces = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((two_l, eig)) => {
                if eig_sum.is_empty() {
                    eig_sum = vec![0.0; eig.len()];
                }
                for (s, e) in eig_sum.iter_mut().zip(&eig) {
                    *s += e;
                }
                traces.push(eig.iter().sum::<f64>());
                stats.push(two_l);
            }
            Err(e) => failures.push(RepFailure {
                rep: rep as u64,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * design.reps as f64 {
        return Err(ElcicError::TooManyFailures {
            failed: failures.len(),
            reps: design.reps,
        });
    }
    let used = stats.len();
    let mean_eigenvalues: Vec<f64> = eig_sum.iter().map(|s| s / used as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(u64::MAX);
    let mut draws: Vec<f64> = (0..CHI2_DRAWS)
        .map(|_| {
            let z = DVector::from_fn(mean_eigenvalues.len(), |_, _| rand::Rng::sample(&mut rng, StandardNormal));
            crate::criteria::weighted_chi2(&mean_eigenvalues, &z)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let mut sorted = stats.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(DiagnosticSummary {
        candidate: cand.label(&design.covariate_names(), design.case.longitudinal()),
        reps_used: used,
        mean_2l: stats.iter().sum::<f64>() / used as f64,
        p95_2l: quantile(&sorted, 0.95),
        mean_trace: traces.iter().sum::<f64>() / used as f64,
        mean_eigenvalues,
        p95_weighted_chi2: quantile(&draws, 0.95),
        failures,
    })
}
