use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use super::CliError;
use crate::criteria::Criterion;
use crate::estimating_equations::{CorrStructure, Family};
use crate::sim_engine::{OutcomeDist, Procedure, SimCase, SimDesign, DEFAULT_REPS, DEFAULT_SEED};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "ELCIC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Select,
    Simulate,
    Diagnose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Some(OutputFormat::Csv),
            "md" | "markdown" => Some(OutputFormat::Markdown),
            "json" => Some(OutputFormat::Json),
            _ => None,
        }
    }

    fn from_extension(path: &Path) -> Option<Self> {
        path.extension().and_then(|e| e.to_str()).and_then(Self::parse)
    }
}

/// Mean-model grid for `select`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskGrid {
    /// Every subset of the covariates; the intercept is always included.
    AllSubsets,
    /// `{x1}`, `{x1,x2}`, ... in declared column order.
    Nested,
    /// Only the full mean model.
    Full,
}

impl MaskGrid {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all-subsets" | "all_subsets" | "all" => Some(MaskGrid::AllSubsets),
            "nested" => Some(MaskGrid::Nested),
            "full" => Some(MaskGrid::Full),
            _ => None,
        }
    }

    /// Masks over `l` design columns, intercept first.
    pub fn masks(self, l: usize) -> Vec<Vec<bool>> {
        let k = l.saturating_sub(1);
        match self {
            MaskGrid::Full => vec![vec![true; l]],
            MaskGrid::Nested => (1..=k)
                .map(|m| (0..l).map(|j| j <= m).collect())
                .collect(),
            MaskGrid::AllSubsets => {
                let mut masks: Vec<Vec<bool>> = (1u64..(1u64 << k))
                    .map(|bits| (0..l).map(|j| j == 0 || bits >> (j - 1) & 1 == 1).collect())
                    .collect();
                masks.sort_by_key(|m| (m.iter().filter(|&&b| b).count(), m.iter().map(|&b| !b).collect::<Vec<_>>()));
                masks
            }
        }
    }
}

/// Candidate grid of a `select` run.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub masks: MaskGrid,
    pub corr: Vec<CorrStructure>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input_path: Option<PathBuf>,
    pub family: Option<Family>,
    pub design: Option<SimDesign>,
    pub candidates: CandidateGrid,
    /// Criterion (select) or procedure (simulate) names, as given.
    pub criteria: Vec<String>,
    /// Diagnose: covariate names of the candidate under study.
    pub diagnose_candidate: Vec<String>,
    /// `None` writes to standard output.
    pub output_path: Option<PathBuf>,
    pub format: OutputFormat,
    pub seed: u64,
    pub threads: usize,
}

impl RunConfig {
    /// Selection procedures requested for a simulation.
    pub fn procedures(&self) -> Result<Vec<Procedure>, CliError> {
        let design = self.design.as_ref().ok_or_else(|| bad("case", None, "simulate requires a design"))?;
        if self.criteria.is_empty() {
            return Ok(Procedure::defaults(design.case));
        }
        self.criteria
            .iter()
            .map(|name| {
                Procedure::parse(name, design.case)
                    .ok_or_else(|| bad("criteria", None, &format!("`{name}` is not available for {}", design.case)))
            })
            .collect()
    }

    /// Criteria requested for a `select` run; ELCIC is always included.
    pub fn select_criteria(&self) -> Result<Vec<Criterion>, CliError> {
        let mut out = vec![Criterion::Elcic];
        for name in &self.criteria {
            let c = Criterion::parse(name).ok_or_else(|| bad("criteria", None, &format!("unknown criterion `{name}`")))?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Parser)]
#[command(name = "elcic", version, about = "Empirical-likelihood model selection for estimating equations")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Rank candidate models on a long-format CSV panel.
    Select(SelectArgs),
    /// Monte Carlo selection rates for a simulation design.
    Simulate(SimulateArgs),
    /// Limiting-distribution check of the log empirical-likelihood ratio.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with default values for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv, markdown or json.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: Option<PathBuf>,
    /// poisson, binomial or gaussian.
    #[arg(long)]
    family: Option<String>,
    /// Comma-separated working correlations.
    #[arg(long, value_delimiter = ',')]
    corr: Option<Vec<String>>,
    /// all-subsets, nested or full.
    #[arg(long = "mask-grid")]
    mask_grid: Option<String>,
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// case1, case2, case3 or aipw.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Outcome distribution of case1: poisson or nb<k> (e.g. nb2).
    #[arg(long)]
    dist: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    design: DesignArgs,
    /// Comma-separated covariates of the candidate, default x1,x2.
    #[arg(long, value_delimiter = ',')]
    candidate: Option<Vec<String>>,
}

/// Values accepted in a configuration file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    family: Option<String>,
    corr: Option<Vec<String>>,
    mask_grid: Option<String>,
    criteria: Option<Vec<String>>,
    case: Option<String>,
    n: Option<usize>,
    #[serde(rename = "T")]
    t: Option<usize>,
    reps: Option<usize>,
    dist: Option<String>,
    candidate: Option<Vec<String>>,
    out: Option<PathBuf>,
    format: Option<String>,
    threads: Option<usize>,
    seed: Option<u64>,
}

fn bad(key: &str, line: Option<usize>, message: &str) -> CliError {
    CliError::BadConfig {
        key: key.to_string(),
        line,
        message: message.to_string(),
    }
}

fn parse_file(doc: &str) -> Result<FileConfig, CliError> {
    toml::from_str(doc).map_err(|e| {
        let line = e.span().map(|s| doc[..s.start.min(doc.len())].matches('\n').count() + 1);
        let from_line = line
            .and_then(|l| doc.lines().nth(l - 1))
            .and_then(|text| text.split_once('='))
            .map(|(k, _)| k.trim().trim_matches('"').to_string());
        let from_message = e.message().split('`').nth(1).map(str::to_string);
        let key = if e.message().starts_with("unknown field") {
            from_message.or(from_line)
        } else {
            from_line.or(from_message)
        };
        CliError::BadConfig {
            key: key.unwrap_or_default(),
            line,
            message: e.message().trim().to_string(),
        }
    })
}

fn parse_dist(s: &str) -> Option<OutcomeDist> {
    let s = s.trim().to_ascii_lowercase();
    if s == "poisson" {
        return Some(OutcomeDist::Poisson);
    }
    let k: f64 = s.strip_prefix("nb")?.trim_start_matches(['_', ':', '-']).parse().ok()?;
    (k > 0.0 && k.is_finite()).then_some(OutcomeDist::NegBin { k })
}

fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<usize, CliError> {
    let threads = match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| bad(THREADS_ENV, None, &format!("`{v}` is not a thread count")))?,
        None => flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    if threads < 1 {
        return Err(bad("threads", None, "threads must be at least 1"));
    }
    Ok(threads)
}

fn resolve_design(args: &DesignArgs, file: &FileConfig, seed: u64) -> Result<SimDesign, CliError> {
    let case_name = args
        .case
        .as_deref()
        .or(file.case.as_deref())
        .ok_or_else(|| bad("case", None, "a simulation case is required"))?;
    let case = SimCase::parse(case_name).ok_or_else(|| bad("case", None, &format!("unknown case `{case_name}`")))?;
    let n = args.n.or(file.n).ok_or_else(|| bad("n", None, "the sample size n is required"))?;
    let default_t = if case.longitudinal() { 3 } else { 1 };
    let t = args.t.or(file.t).unwrap_or(default_t);
    let reps = args.reps.or(file.reps).unwrap_or(DEFAULT_REPS);
    let mut design = SimDesign::for_case(case, n, t).with_reps(reps).with_seed(seed);
    if case.longitudinal() && t < 2 {
        return Err(bad("T", None, &format!("{case} is longitudinal and needs T >= 2, got {t}")));
    }
    if !case.longitudinal() && t != 1 {
        return Err(bad("T", None, &format!("{case} is cross-sectional and needs T = 1, got {t}")));
    }
    if let Some(d) = args.dist.as_deref().or(file.dist.as_deref()) {
        if case != SimCase::GlmCount {
            return Err(bad("dist", None, "dist applies to case1 only"));
        }
        design.truth.outcome = parse_dist(d).ok_or_else(|| bad("dist", None, &format!("unknown distribution `{d}`")))?;
    }
    design.validate().map_err(|e| bad("case", None, &e.to_string()))?;
    Ok(design)
}

/// Resolves a run configuration from command-line arguments (program name
/// first) and an optional TOML document. Flags override file values. When
/// `file` is `None` and `--config` is given, that file is read.
pub fn parse_config<I, T>(args: I, file: Option<&str>) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = std::env::var(THREADS_ENV).ok();
    parse_config_with_env(args, file, env.as_deref())
}

/// [`parse_config`] with an explicit value for the thread override variable.
pub fn parse_config_with_env<I, T>(args: I, file: Option<&str>, threads_env: Option<&str>) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::from_clap)?;
    let common = match &cli.command {
        Sub::Select(a) => &a.common,
        Sub::Simulate(a) => &a.common,
        Sub::Diagnose(a) => &a.common,
    };
    let owned;
    let doc = match (file, &common.config) {
        (Some(doc), _) => Some(doc),
        (None, Some(path)) => {
            owned = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Some(owned.as_str())
        }
        (None, None) => None,
    };
    let fc = match doc {
        Some(d) => parse_file(d)?,
        None => FileConfig::default(),
    };

    let output_path = common.out.clone().or_else(|| fc.out.clone());
    let format = match common.format.as_deref().or(fc.format.as_deref()) {
        Some(f) => OutputFormat::parse(f).ok_or_else(|| bad("format", None, &format!("unknown format `{f}`")))?,
        None => output_path
            .as_deref()
            .and_then(OutputFormat::from_extension)
            .unwrap_or(OutputFormat::Csv),
    };
    let threads = resolve_threads(common.threads.or(fc.threads), threads_env)?;
    let seed = common.seed.or(fc.seed).unwrap_or(DEFAULT_SEED);
    let mut cfg = RunConfig {
        command: Command::Select,
        input_path: None,
        family: None,
        design: None,
        candidates: CandidateGrid {
            masks: MaskGrid::AllSubsets,
            corr: Vec::new(),
        },
        criteria: Vec::new(),
        diagnose_candidate: Vec::new(),
        output_path,
        format,
        seed,
        threads,
    };

    match &cli.command {
        Sub::Select(a) => {
            cfg.input_path = Some(
                a.input
                    .clone()
                    .or_else(|| fc.input.clone())
                    .ok_or_else(|| bad("input", None, "select requires an input file"))?,
            );
            let fam = a
                .family
                .as_deref()
                .or(fc.family.as_deref())
                .ok_or_else(|| bad("family", None, "select requires a family"))?;
            cfg.family = Some(Family::parse(fam).ok_or_else(|| bad("family", None, &format!("unknown family `{fam}`")))?);
            if let Some(g) = a.mask_grid.as_deref().or(fc.mask_grid.as_deref()) {
                cfg.candidates.masks = MaskGrid::parse(g).ok_or_else(|| bad("mask_grid", None, &format!("unknown mask grid `{g}`")))?;
            }
            for c in a.corr.clone().or_else(|| fc.corr.clone()).unwrap_or_default() {
                let s = CorrStructure::parse(&c).ok_or_else(|| bad("corr", None, &format!("unknown correlation `{c}`")))?;
                if !cfg.candidates.corr.contains(&s) {
                    cfg.candidates.corr.push(s);
                }
            }
            cfg.criteria = a.criteria.clone().or_else(|| fc.criteria.clone()).unwrap_or_default();
            cfg.select_criteria()?;
        }
        Sub::Simulate(a) => {
            cfg.command = Command::Simulate;
            cfg.design = Some(resolve_design(&a.design, &fc, seed)?);
            cfg.criteria = a.criteria.clone().or_else(|| fc.criteria.clone()).unwrap_or_default();
            cfg.procedures()?;
        }
        Sub::Diagnose(a) => {
            cfg.command = Command::Diagnose;
            let design = resolve_design(&a.design, &fc, seed)?;
            if design.case != SimCase::GlmCount {
                return Err(bad("case", None, "diagnose supports case1 only"));
            }
            let names = design.covariate_names();
            let cand = a
                .candidate
                .clone()
                .or_else(|| fc.candidate.clone())
                .unwrap_or_else(|| vec!["x1".into(), "x2".into()]);
            if let Some(c) = cand.iter().find(|c| !names[1..].contains(c)) {
                return Err(bad("candidate", None, &format!("unknown covariate `{c}`")));
            }
            cfg.design = Some(design);
            cfg.diagnose_candidate = cand;
        }
    }
    Ok(cfg)
}
