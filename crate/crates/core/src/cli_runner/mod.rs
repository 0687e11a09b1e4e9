//! Command-line front end: configuration, CSV ingestion, execution and
//! report serialization.

mod config;
mod ingest;
mod report;

pub use config::{
    parse_config, parse_config_with_env, CandidateGrid, Command, MaskGrid, OutputFormat, RunConfig, THREADS_ENV,
};
pub use ingest::{ingest_csv, ingest_reader, write_panel_csv, REQUIRED_COLUMNS};
pub use report::{emit_report, fmt_sig, render, round_sig, DiagnosticReport, Report, SelectionReport, SelectionRow};

use std::ffi::OsString;
use std::path::PathBuf;

use thiserror::Error;

use crate::criteria::{evaluate_candidates, rank};
use crate::error::ElcicError;
use crate::estimating_equations::{CandidateModel, CorrStructure, PanelDataset};
use crate::model_fitting::Framework;
use crate::sim_engine::{run_diagnostic, run_mc, Experiment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad configuration for `{key}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    BadConfig {
        key: String,
        line: Option<usize>,
        message: String,
    },

    /// Help or version text requested on the command line.
    #[error("{0}")]
    Info(String),

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("duplicate cell for id {id}, time {time} (rows {first} and {second})")]
    RaggedPanel {
        id: String,
        time: String,
        first: u64,
        second: u64,
    },

    #[error("parse error at row {row}: {message}")]
    ParseError { row: u64, message: String },

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error(transparent)]
    Numerical(#[from] ElcicError),
}

impl CliError {
    fn from_clap(e: clap::Error) -> Self {
        use clap::error::{ContextKind, ErrorKind};
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                CliError::Info(e.render().to_string())
            }
            _ => {
                let key = e
                    .get(ContextKind::InvalidArg)
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                CliError::BadConfig {
                    key,
                    line: None,
                    message: e.render().to_string().trim().to_string(),
                }
            }
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => EXIT_OK,
            CliError::BadConfig { .. } => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::SchemaError(_) | CliError::RaggedPanel { .. } | CliError::ParseError { .. } | CliError::Io { .. } => {
                EXIT_IO
            }
        }
    }
}

/// Candidate models of a `select` run over `data`.
pub fn select_candidates(data: &PanelDataset, cfg: &RunConfig) -> Result<Vec<CandidateModel>, CliError> {
    let family = cfg.family.ok_or_else(|| CliError::BadConfig {
        key: "family".into(),
        line: None,
        message: "select requires a family".into(),
    })?;
    let t = data.n_times();
    let corr = if cfg.candidates.corr.is_empty() {
        if t == 1 {
            vec![CorrStructure::Independence]
        } else {
            vec![CorrStructure::Exchangeable, CorrStructure::Ar1, CorrStructure::Independence]
        }
    } else {
        cfg.candidates.corr.clone()
    };
    if t == 1 && corr.iter().any(|&c| c != CorrStructure::Independence) {
        return Err(CliError::BadConfig {
            key: "corr".into(),
            line: None,
            message: "cross-sectional data admit only IND".into(),
        });
    }
    let masks = cfg.candidates.masks.masks(data.n_covariates());
    let mut out = Vec::new();
    for &c in &corr {
        for m in &masks {
            out.push(CandidateModel::new(m.clone(), c, family, t)?);
        }
    }
    Ok(out)
}

fn run_select(cfg: &RunConfig) -> Result<Report, CliError> {
    let path = cfg.input_path.as_ref().ok_or_else(|| CliError::BadConfig {
        key: "input".into(),
        line: None,
        message: "select requires an input file".into(),
    })?;
    let data = ingest_csv(path)?;
    let candidates = select_candidates(&data, cfg)?;
    let criteria = cfg.select_criteria()?;
    let framework = Framework::for_data(&data);
    let family = cfg.family.unwrap_or(candidates[0].family());
    if let Some(c) = criteria.iter().find(|c| !c.supports(&framework, family)) {
        return Err(CliError::BadConfig {
            key: "criteria".into(),
            line: None,
            message: format!("{c} is not defined for {} data with the {} family", if data.n_times() == 1 { "cross-sectional" } else { "longitudinal" }, family.name()),
        });
    }
    let reports = evaluate_candidates(&data, &candidates, &framework, &criteria)?;
    let longitudinal = data.n_times() > 1;
    let names = data.covariate_names();
    let winners = criteria
        .iter()
        .map(|&c| {
            let best = rank(&reports, c).into_iter().next()?;
            reports[best]
                .value(c)
                .is_finite()
                .then(|| reports[best].candidate.label(names, longitudinal))
        })
        .collect();
    let rows = reports
        .iter()
        .map(|r| SelectionRow {
            candidate: r.candidate.label(names, longitudinal),
            p: r.p,
            values: criteria.iter().map(|&c| r.value(c)).collect(),
            hull_flag: r.hull_flag,
            error: r.error.as_ref().map(|e| e.to_string()),
        })
        .collect();
    Ok(Report::Selection(SelectionReport {
        n: data.n(),
        t: data.n_times(),
        family: family.name().to_string(),
        criteria: criteria.iter().map(|c| c.label().to_string()).collect(),
        rows,
        winners,
    }))
}

fn run_simulate(cfg: &RunConfig) -> Result<Report, CliError> {
    let design = cfg.design.as_ref().ok_or_else(|| CliError::BadConfig {
        key: "case".into(),
        line: None,
        message: "simulate requires a design".into(),
    })?;
    let exp = Experiment::default_for(design)?.with_procedures(cfg.procedures()?);
    Ok(Report::Simulation(run_mc(design, &exp)?))
}

fn run_diagnose(cfg: &RunConfig) -> Result<Report, CliError> {
    let design = cfg.design.as_ref().ok_or_else(|| CliError::BadConfig {
        key: "case".into(),
        line: None,
        message: "diagnose requires a design".into(),
    })?;
    let names = design.covariate_names();
    let cols: Vec<usize> = cfg
        .diagnose_candidate
        .iter()
        .filter_map(|c| names.iter().position(|n| n == c))
        .collect();
    let cand = CandidateModel::glm(design.family(), names.len(), &cols)?;
    let summary = run_diagnostic(design, &cand)?;
    Ok(Report::Diagnostic(DiagnosticReport {
        design: design.clone(),
        summary,
    }))
}

/// Runs the configured command on the current rayon pool.
pub fn execute(cfg: &RunConfig) -> Result<Report, CliError> {
    match cfg.command {
        Command::Select => run_select(cfg),
        Command::Simulate => run_simulate(cfg),
        Command::Diagnose => run_diagnose(cfg),
    }
}

/// Executes on a pool of `cfg.threads` workers and writes the report.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::BadConfig {
            key: "threads".into(),
            line: None,
            message: e.to_string(),
        })?;
    let report = pool.install(|| execute(cfg))?;
    emit_report(&report, cfg)
}

/// Full command-line entry point; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_config(args, None).and_then(|cfg| run(&cfg)) {
        Ok(()) => EXIT_OK,
        Err(CliError::Info(text)) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("elcic: {e}");
            e.exit_code()
        }
    }
}
