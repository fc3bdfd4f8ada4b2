//! Single runs and Monte-Carlo sweeps over `(N, seed, variant)` with CSV
//! output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{Plan, PlannerConfig, PlannerError, PlanningInstance, Variant};
use crate::scenario::{bundled, load_scenario, ScenarioError};
use crate::world::ProblemInstance;

pub const RUNS_HEADER: [&str; 9] =
    ["variant", "N", "seed", "success", "cost", "wall_ms", "steer_calls", "collision_checks", "cache_hit"];

pub const SUMMARY_HEADER: [&str; 10] =
    ["variant", "N", "runs", "successes", "success_rate", "ci_low", "ci_high", "mean_cost", "sem_cost", "median_cost"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    #[default]
    Dfmt,
    Dprm,
}

impl FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dfmt" => Ok(PlannerKind::Dfmt),
            "dprm" => Ok(PlannerKind::Dprm),
            _ => Err(format!("unknown planner {s:?}: expected dfmt or dprm")),
        }
    }
}

/// Whether `wall_ms` is recorded. Omitted timing keeps output byte-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Measured,
    #[default]
    Omitted,
}

/// A connection variant, optionally run with a precomputed neighbor cache.
/// Written `optimal`, `fixed:0.5`, `optimal+cache`, `fixed:0.5+cache`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub cache: bool,
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.variant, if self.cache { "+cache" } else { "" })
    }
}

impl FromStr for VariantSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, cache) = match s.strip_suffix("+cache") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let variant = base.parse::<Variant>().map_err(|e| e.to_string())?;
        Ok(Self { variant, cache })
    }
}

impl Serialize for VariantSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariantSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn default_variants() -> Vec<VariantSpec> {
    vec![VariantSpec { variant: Variant::Optimal, cache: false }]
}

fn default_eta() -> f64 {
    0.5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Scenario file, relative to the experiment file, or `builtin:NAME`.
    pub scenario: String,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub planner: PlannerKind,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub radius_override: Option<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub timing: Timing,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `path`, resolving relative scenario and output paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let mut spec = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if !spec.scenario.starts_with("builtin:") && Path::new(&spec.scenario).is_relative() {
            spec.scenario = base.join(&spec.scenario).display().to_string();
        }
        if spec.output_dir.is_relative() {
            spec.output_dir = base.join(&spec.output_dir);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.n.is_empty() {
            return bad("the N list is empty");
        }
        if self.seeds.is_empty() {
            return bad("the seed list is empty");
        }
        if self.variants.is_empty() {
            return bad("the variant list is empty");
        }
        for &n in &self.n {
            self.config(n, self.variants[0]).validate()?;
        }
        Ok(())
    }

    pub fn config(&self, n: usize, v: VariantSpec) -> PlannerConfig {
        PlannerConfig {
            n_samples: n,
            eta: self.eta,
            radius_override: self.radius_override,
            variant: v.variant,
            cache_neighbors: v.cache,
            ..PlannerConfig::default()
        }
    }

    pub fn problem(&self) -> Result<ProblemInstance, ExperimentError> {
        match self.scenario.strip_prefix("builtin:") {
            Some(name) => bundled(name).ok_or_else(|| ExperimentError::Invalid(format!("no bundled scenario {name:?}"))),
            None => Ok(load_scenario(Path::new(&self.scenario))?),
        }
    }

    /// Cells in output order: N outermost, then variant, then seed.
    pub fn cells(&self) -> Vec<(usize, VariantSpec, u64)> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &v in &self.variants {
                for &s in &self.seeds {
                    out.push((n, v, s));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub success: bool,
    pub cost: Option<f64>,
    pub wall_ms: Option<f64>,
    pub steer_calls: u64,
    pub collision_checks: u64,
    pub cache_hit: bool,
}

/// 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl RunRecord {
    pub fn from_plan(plan: &Plan, n: usize, seed: u64, variant: &str, timing: Timing) -> Self {
        Self {
            variant: variant.to_string(),
            n,
            seed,
            success: plan.success,
            cost: plan.cost.filter(|_| plan.success),
            wall_ms: (timing == Timing::Measured).then_some(plan.stats.wall_ms),
            steer_calls: plan.stats.steer_calls,
            collision_checks: plan.stats.collision_checks,
            cache_hit: plan.stats.cache_hit,
        }
    }

    /// A failed cell that did not produce a plan.
    fn failed(n: usize, seed: u64, variant: &str) -> Self {
        Self {
            variant: variant.to_string(),
            n,
            seed,
            success: false,
            cost: None,
            wall_ms: None,
            steer_calls: 0,
            collision_checks: 0,
            cache_hit: false,
        }
    }

    pub fn csv_fields(&self) -> [String; 9] {
        let opt = |x: Option<f64>| x.map(format_float).unwrap_or_default();
        [
            self.variant.clone(),
            self.n.to_string(),
            self.seed.to_string(),
            self.success.to_string(),
            opt(self.cost),
            opt(self.wall_ms),
            self.steer_calls.to_string(),
            self.collision_checks.to_string(),
            self.cache_hit.to_string(),
        ]
    }
}

/// Plans once. `cache` names a neighbor-cache file to load or create when
/// `cfg.cache_neighbors` is set; without it the cache is built in memory.
pub fn run_single(
    problem: ProblemInstance,
    cfg: PlannerConfig,
    seed: u64,
    planner: PlannerKind,
    cache: Option<&Path>,
    timing: Timing,
) -> Result<(Plan, RunRecord), PlannerError> {
    let start = Instant::now();
    let n = cfg.n_samples;
    let variant = VariantSpec { variant: cfg.variant, cache: cfg.cache_neighbors }.to_string();
    let use_cache = cfg.cache_neighbors;
    let inst = PlanningInstance::new(problem, cfg, seed)?;
    let cache = match (use_cache, cache) {
        (false, _) => None,
        (true, Some(path)) => Some(inst.load_or_build_cache(path)?.0),
        (true, None) => Some(inst.build_cache()),
    };
    let mut plan = match planner {
        PlannerKind::Dfmt => inst.dfmt(cache.as_ref())?,
        PlannerKind::Dprm => inst.dprm(cache.as_ref())?,
    };
    plan.stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let record = RunRecord::from_plan(&plan, n, seed, &variant, timing);
    Ok((plan, record))
}

/// Per-`(N, variant)` statistics over the detail rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub variant: String,
    pub n: usize,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Wilson 95% interval for the success probability.
    pub ci: (f64, f64),
    /// Over successful runs only; `None` without any.
    pub mean_cost: Option<f64>,
    pub sem_cost: Option<f64>,
    pub median_cost: Option<f64>,
}

impl Aggregate {
    pub fn csv_fields(&self) -> [String; 10] {
        let opt = |x: Option<f64>| x.map(format_float).unwrap_or_default();
        [
            self.variant.clone(),
            self.n.to_string(),
            self.runs.to_string(),
            self.successes.to_string(),
            format_float(self.success_rate),
            format_float(self.ci.0),
            format_float(self.ci.1),
            opt(self.mean_cost),
            opt(self.sem_cost),
            opt(self.median_cost),
        ]
    }
}

/// Wilson score interval at `z = 1.96`.
pub fn wilson_interval(successes: usize, runs: usize) -> (f64, f64) {
    if runs == 0 {
        return (0.0, 1.0);
    }
    let z: f64 = 1.959963984540054;
    let n = runs as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn aggregate(records: &[RunRecord], variant: &str, n: usize) -> Aggregate {
    let rows: Vec<&RunRecord> = records.iter().filter(|r| r.variant == variant && r.n == n).collect();
    let costs: Vec<f64> = rows.iter().filter_map(|r| r.cost).collect();
    let runs = rows.len();
    let successes = rows.iter().filter(|r| r.success).count();
    let k = costs.len() as f64;
    let mean = (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / k);
    let sem = mean.filter(|_| costs.len() > 1).map(|m| {
        let var = costs.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    });
    Aggregate {
        variant: variant.to_string(),
        n,
        runs,
        successes,
        success_rate: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
        ci: wilson_interval(successes, runs),
        mean_cost: mean,
        sem_cost: sem,
        median_cost: median(&costs),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// One row per cell, in [`ExperimentSpec::cells`] order.
    pub records: Vec<RunRecord>,
    /// One row per `(N, variant)`.
    pub summary: Vec<Aggregate>,
    /// Cells that raised an error, with the message; their rows record a
    /// failure.
    pub errors: Vec<(usize, String)>,
}

impl SweepOutput {
    pub fn runs_csv(&self) -> Result<String, ExperimentError> {
        to_csv(&RUNS_HEADER, self.records.iter().map(RunRecord::csv_fields))
    }

    pub fn summary_csv(&self) -> Result<String, ExperimentError> {
        to_csv(&SUMMARY_HEADER, self.summary.iter().map(Aggregate::csv_fields))
    }
}

fn to_csv<const K: usize>(header: &[&str; K], rows: impl Iterator<Item = [String; K]>) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("fields are UTF-8"))
}

/// Runs every cell (in parallel) and aggregates. Cells use their listed
/// seed directly, so each row is reproducible with a single `plan` run.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutput, ExperimentError> {
    spec.validate()?;
    let problem = spec.problem()?;
    let cache_dir = spec.output_dir.join("cache");
    if spec.variants.iter().any(|v| v.cache) {
        std::fs::create_dir_all(&cache_dir).map_err(io_error(&cache_dir))?;
    }
    let cells = spec.cells();
    let results: Vec<Result<RunRecord, String>> = cells
        .par_iter()
        .map(|&(n, v, seed)| {
            let cfg = spec.config(n, v);
            let path = cache_dir.join(format!("N{n}-seed{seed}-{}.json", v.variant).replace(':', "_"));
            run_single(problem.clone(), cfg, seed, spec.planner, v.cache.then_some(path.as_path()), spec.timing)
                .map(|(_, r)| r)
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut records = Vec::with_capacity(cells.len());
    let mut errors = Vec::new();
    for (i, (res, &(n, v, seed))) in results.into_iter().zip(&cells).enumerate() {
        match res {
            Ok(r) => records.push(r),
            Err(e) => {
                records.push(RunRecord::failed(n, seed, &v.to_string()));
                errors.push((i, e));
            }
        }
    }
    let mut summary = Vec::new();
    for &n in &spec.n {
        for v in &spec.variants {
            summary.push(aggregate(&records, &v.to_string(), n));
        }
    }
    Ok(SweepOutput { records, summary, errors })
}

/// Runs the sweep and writes `runs.csv` and `summary.csv` to `output_dir`.
pub fn write_sweep(spec: &ExperimentSpec) -> Result<SweepOutput, ExperimentError> {
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let out = run_sweep(spec)?;
    for (name, text) in [("runs.csv", out.runs_csv()?), ("summary.csv", out.summary_csv()?)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_error(&path))?;
    }
    Ok(out)
}
