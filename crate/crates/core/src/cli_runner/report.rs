use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;

use serde::Serialize;
use serde_json::Value;

use super::config::{OutputFormat, RunConfig};
use super::CliError;
use crate::criteria::Criterion;
use crate::error::ElcicError;
use crate::sim_engine::{DiagnosticSummary, SelectionTable, SimDesign};

/// Ranked criterion values of a `select` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub family: String,
    pub criteria: Vec<String>,
    pub rows: Vec<SelectionRow>,
    /// Winning candidate label per criterion, in `criteria` order.
    pub winners: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRow {
    pub candidate: String,
    pub p: usize,
    /// One value per criterion, `+inf` when unavailable.
    pub values: Vec<f64>,
    pub hull_flag: bool,
    pub error: Option<String>,
}

impl SelectionReport {
    pub fn value(&self, candidate: &str, criterion: Criterion) -> Option<f64> {
        let k = self.criteria.iter().position(|c| c == criterion.label())?;
        self.rows.iter().find(|r| r.candidate == candidate).map(|r| r.values[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub design: SimDesign,
    #[serde(flatten)]
    pub summary: DiagnosticSummary,
}

/// Result of any command.
#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Simulation(SelectionTable),
    Selection(SelectionReport),
    Diagnostic(DiagnosticReport),
}

impl Report {
    fn is_empty(&self) -> bool {
        match self {
            Report::Simulation(t) => t.candidates.is_empty(),
            Report::Selection(s) => s.rows.is_empty(),
            Report::Diagnostic(d) => d.summary.candidate.is_empty(),
        }
    }
}

/// Rounds to six significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Six-significant-digit text form; `inf`, `-inf` and `NaN` for non-finite values.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig(x);
    let a = r.abs();
    if a != 0.0 && !(1e-4..1e12).contains(&a) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(num) if num.is_f64() => {
            if let Some(n) = num.as_f64().and_then(|x| serde_json::Number::from_f64(round_sig(x))) {
                *num = n;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

fn csv_text(rows: &[[String; 4]]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io {
        path: "<report>".into(),
        message: e.to_string(),
    };
    w.write_record(["candidate", "criterion", "value", "rate"]).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: "<report>".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn csv_rows(report: &Report) -> Vec<[String; 4]> {
    match report {
        Report::Simulation(t) => {
            let mut rows: Vec<[String; 4]> = t
                .rates
                .iter()
                .map(|r| [r.candidate.clone(), r.procedure.clone(), r.count.to_string(), fmt_sig(r.rate)])
                .collect();
            rows.extend(
                t.metrics
                    .iter()
                    .map(|m| [m.metric.clone(), m.procedure.clone(), fmt_sig(m.value), String::new()]),
            );
            rows
        }
        Report::Selection(s) => s
            .rows
            .iter()
            .flat_map(|r| {
                s.criteria
                    .iter()
                    .zip(&r.values)
                    .map(|(c, v)| [r.candidate.clone(), c.clone(), fmt_sig(*v), String::new()])
            })
            .collect(),
        Report::Diagnostic(d) => {
            let s = &d.summary;
            let mut rows = vec![
                ("mean_2l", s.mean_2l),
                ("p95_2l", s.p95_2l),
                ("mean_trace", s.mean_trace),
                ("p95_weighted_chi2", s.p95_weighted_chi2),
            ]
            .into_iter()
            .map(|(k, v)| [s.candidate.clone(), k.to_string(), fmt_sig(v), String::new()])
            .collect::<Vec<_>>();
            rows.extend(
                s.mean_eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(k, v)| [s.candidate.clone(), format!("eigenvalue_{}", k + 1), fmt_sig(*v), String::new()]),
            );
            rows
        }
    }
}

fn md_row(cells: impl IntoIterator<Item = String>) -> String {
    let cells: Vec<String> = cells.into_iter().collect();
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(k: usize) -> String {
    format!("|{}\n", "---|".repeat(k))
}

fn markdown(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Simulation(t) => {
            let d = &t.design;
            let _ = writeln!(
                out,
                "# {} selection rates\n\nn = {}, T = {}, outcome = {}, reps = {}, seed = {}, true model = {}\n",
                d.case,
                d.n,
                d.t,
                d.truth.outcome.label(),
                d.reps,
                d.seed,
                t.truth
            );
            out.push_str(&md_row(std::iter::once("Procedure".to_string()).chain(t.candidates.iter().cloned())));
            out.push_str(&md_rule(t.candidates.len() + 1));
            for p in &t.procedures {
                out.push_str(&md_row(
                    std::iter::once(p.clone()).chain(t.candidates.iter().map(|c| fmt_sig(t.rate(p, c)))),
                ));
            }
            if !t.metrics.is_empty() {
                let mut names: Vec<String> = Vec::new();
                for m in &t.metrics {
                    if !names.contains(&m.metric) {
                        names.push(m.metric.clone());
                    }
                }
                out.push('\n');
                out.push_str(&md_row(std::iter::once("Procedure".to_string()).chain(names.iter().cloned())));
                out.push_str(&md_rule(names.len() + 1));
                for p in &t.procedures {
                    if t.metrics.iter().any(|m| &m.procedure == p) {
                        out.push_str(&md_row(std::iter::once(p.clone()).chain(
                            names.iter().map(|m| t.metric(p, m).map_or(String::new(), fmt_sig)),
                        )));
                    }
                }
            }
            let _ = writeln!(out, "\nReplicates used: {} of {}", t.reps_used, d.reps);
            for f in &t.failures {
                let _ = writeln!(out, "- replicate {} failed: {}", f.rep, f.message);
            }
        }
        Report::Selection(s) => {
            let _ = writeln!(out, "# Candidate ranking\n\nn = {}, T = {}, family = {}\n", s.n, s.t, s.family);
            out.push_str(&md_row(
                ["Candidate".to_string(), "p".to_string()].into_iter().chain(s.criteria.iter().cloned()),
            ));
            out.push_str(&md_rule(s.criteria.len() + 2));
            for r in &s.rows {
                let cells = r.values.iter().zip(&s.winners).map(|(v, w)| {
                    let txt = fmt_sig(*v);
                    if w.as_deref() == Some(r.candidate.as_str()) {
                        format!("**{txt}**")
                    } else {
                        txt
                    }
                });
                out.push_str(&md_row([r.candidate.clone(), r.p.to_string()].into_iter().chain(cells)));
            }
            out.push('\n');
            for (c, w) in s.criteria.iter().zip(&s.winners) {
                let _ = writeln!(out, "- {c}: {}", w.as_deref().unwrap_or("none"));
            }
            for r in s.rows.iter().filter(|r| r.error.is_some()) {
                let _ = writeln!(out, "- {} failed: {}", r.candidate, r.error.as_deref().unwrap_or(""));
            }
        }
        Report::Diagnostic(d) => {
            let s = &d.summary;
            let _ = writeln!(
                out,
                "# Limiting distribution of 2l\n\ncandidate = {}, n = {}, reps used = {} of {}, seed = {}\n",
                s.candidate, d.design.n, s.reps_used, d.design.reps, d.design.seed
            );
            out.push_str("| Statistic | Value |\n|---|---|\n");
            for (k, v) in [
                ("mean of 2l", s.mean_2l),
                ("mean trace", s.mean_trace),
                ("95th percentile of 2l", s.p95_2l),
                ("95th percentile, weighted chi-square", s.p95_weighted_chi2),
            ] {
                out.push_str(&md_row([k.to_string(), fmt_sig(v)]));
            }
            let eig: Vec<String> = s.mean_eigenvalues.iter().map(|v| fmt_sig(*v)).collect();
            let _ = writeln!(out, "\nEigenvalues: {}", eig.join(", "));
        }
    }
    out
}

fn json(report: &Report, seed: u64) -> Result<String, CliError> {
    let mut v = match report {
        Report::Simulation(t) => serde_json::to_value(t),
        Report::Selection(s) => serde_json::to_value(s),
        Report::Diagnostic(d) => serde_json::to_value(d),
    }
    .map_err(|e| CliError::Io {
        path: "<report>".into(),
        message: e.to_string(),
    })?;
    if let Value::Object(map) = &mut v {
        map.insert("seed".into(), Value::from(seed));
    }
    round_value(&mut v);
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Io {
        path: "<report>".into(),
        message: e.to_string(),
    })?;
    text.push('\n');
    Ok(text)
}

/// Renders the report in the requested format.
pub fn render(report: &Report, format: OutputFormat, seed: u64) -> Result<String, CliError> {
    if report.is_empty() {
        return Err(CliError::Numerical(ElcicError::EmptyCandidates));
    }
    match format {
        OutputFormat::Csv => csv_text(&csv_rows(report)),
        OutputFormat::Markdown => Ok(markdown(report)),
        OutputFormat::Json => json(report, seed),
    }
}

/// Renders the report and writes it to the configured output, or to standard
/// output when none is set. Nothing is created when rendering fails.
pub fn emit_report(report: &Report, cfg: &RunConfig) -> Result<(), CliError> {
    let text = render(report, cfg.format, cfg.seed)?;
    match &cfg.output_path {
        Some(path) => {
            let io = |e: std::io::Error| CliError::Io {
                path: path.clone(),
                message: e.to_string(),
            };
            let mut f = File::create(path).map_err(io)?;
            f.write_all(text.as_bytes()).map_err(io)?;
            f.sync_all().map_err(io)
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io {
            path: "<stdout>".into(),
            message: e.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.946), "0.946");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(-0.0), "0");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(f64::NAN), "NaN");
    }

    #[test]
    fn json_numbers_are_rounded() {
        let mut v = serde_json::json!({"a": 0.123456789, "b": [2.0000001], "c": 3});
        round_value(&mut v);
        assert_eq!(v.to_string(), r#"{"a":0.123457,"b":[2.0],"c":3}"#);
    }

    #[test]
    fn empty_report_is_rejected() {
        let report = Report::Selection(SelectionReport {
            n: 1,
            t: 1,
            family: "poisson".into(),
            criteria: vec!["ELCIC".into()],
            rows: vec![],
            winners: vec![None],
        });
        assert!(render(&report, OutputFormat::Csv, 1).is_err());
    }
}
