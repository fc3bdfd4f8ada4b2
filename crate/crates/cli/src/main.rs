use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfmt::experiment::{run_single, write_sweep, ExperimentSpec, PlannerKind, Timing, RUNS_HEADER};
use dfmt::planner::{PlannerConfig, PlannerError, PlanningInstance, Variant};
use dfmt::scenario::load_scenario;
use dfmt::svg::emit_svg;
use dfmt::verify::{run_property_suite, Suite};

/// Overrides the output directory of `plan` and `sweep`.
const OUTPUT_DIR_VAR: &str = "DFMT_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "dfmt", version, about = "DFMT*/DPRM* planning for linear-affine systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan once and write `<stem>.plan.json`; prints the run as CSV.
    Plan {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `optimal` or `fixed:TAU`.
        #[arg(long, default_value = "optimal")]
        variant: Variant,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        /// Connection-cost threshold replacing the computed one.
        #[arg(long)]
        radius: Option<f64>,
        /// Neighbor cache file, loaded if present and written otherwise.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value = "dfmt")]
        planner: PlannerKind,
        /// Record wall time in the CSV row.
        #[arg(long)]
        timing: bool,
    },
    /// Run an experiment file; writes runs.csv and summary.csv.
    Sweep { experiment: PathBuf },
    /// Run a property suite: spectral, steering, exhaustivity or all.
    Verify { suite: String },
}

enum Failure {
    /// Bad input: exit code 2.
    Input(String),
    /// The planner ran but did not succeed, or a check failed: exit code 1.
    Run(String),
}

impl From<PlannerError> for Failure {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::InvalidConfig(_) | PlannerError::World(_) | PlannerError::Cache(_) => {
                Failure::Input(e.to_string())
            }
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn output_dir(default: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn plan(
    scenario: &Path,
    n: usize,
    seed: u64,
    variant: Variant,
    eta: f64,
    radius: Option<f64>,
    cache: Option<&Path>,
    svg: Option<&Path>,
    planner: PlannerKind,
    timing: bool,
) -> Result<(), Failure> {
    let problem = load_scenario(scenario).map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    let cfg = PlannerConfig {
        n_samples: n,
        eta,
        radius_override: radius,
        variant,
        cache_neighbors: cache.is_some(),
        ..PlannerConfig::default()
    };
    let timing = if timing { Timing::Measured } else { Timing::Omitted };
    let (plan, record) = run_single(problem.clone(), cfg.clone(), seed, planner, cache, timing)?;

    let stem = scenario.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    let json = serde_json::to_string_pretty(&plan).expect("plans serialize");
    write(&output_dir(Path::new(".")).join(format!("{stem}.plan.json")), &(json + "\n"))?;
    if let Some(path) = svg {
        let inst = PlanningInstance::new(problem, cfg, seed)?;
        let text = emit_svg(&plan, inst.problem(), inst.steerer(), [inst.problem().position_dims()[0], inst.problem().position_dims()[1]])
            .map_err(|e| Failure::Input(e.to_string()))?;
        write(path, &text)?;
    }
    println!("{}", RUNS_HEADER.join(","));
    println!("{}", record.csv_fields().join(","));
    if plan.success {
        Ok(())
    } else {
        Err(Failure::Run(format!("no path found with N = {n}, seed {seed}")))
    }
}

fn sweep(path: &Path) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    spec.output_dir = output_dir(&spec.output_dir);
    let out = write_sweep(&spec).map_err(|e| Failure::Input(e.to_string()))?;
    for s in &out.summary {
        eprintln!(
            "{} N={}: {}/{} succeeded, mean cost {}",
            s.variant,
            s.n,
            s.successes,
            s.runs,
            s.mean_cost.map_or("-".into(), |c| format!("{c:.6}"))
        );
    }
    eprintln!("wrote {}", spec.output_dir.display());
    if out.errors.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = out.errors.iter().map(|(i, e)| format!("cell {i}: {e}")).collect();
        Err(Failure::Run(lines.join("\n")))
    }
}

fn verify(name: &str) -> Result<(), Failure> {
    let suites: Vec<Suite> = match name {
        "all" => Suite::ALL.to_vec(),
        _ => vec![name.parse().map_err(Failure::Input)?],
    };
    let mut ok = true;
    for s in suites {
        let report = run_property_suite(s);
        println!("{report}");
        ok &= report.passed();
    }
    if ok { Ok(()) } else { Err(Failure::Run("property suite failed".into())) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { scenario, n, seed, variant, eta, radius, cache, svg, planner, timing } => plan(
            &scenario,
            n,
            seed,
            variant,
            eta,
            radius,
            cache.as_deref(),
            svg.as_deref(),
            planner,
            timing,
        ),
        Command::Sweep { experiment } => sweep(&experiment),
        Command::Verify { suite } => verify(&suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
