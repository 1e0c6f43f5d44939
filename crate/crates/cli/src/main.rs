//! `gridreduce`: batch front end for parsing, OPF, feature listing,
//! reduction, parameter sweeps and load-scenario verification.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, 3 unreadable or
//! inconsistent input, 4 infeasible or unsolvable OPF.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridreduce::case_io::{
    apply_annotations, parse_case_with_warnings, parse_mapping, parse_profile, write_case, write_mapping,
    write_report,
};
use gridreduce::dcopf::{solve_grid, OpfSolution, DEFAULT_TOLERANCE};
use gridreduce::features::{identify, FeatureConfig};
use gridreduce::pipeline::{
    run_pipeline, scenarios_to_csv, sweep, sweep_to_csv, verify_scenarios, PipelineConfig, PipelineError,
    StageSet, SweepParameter,
};
use gridreduce::Grid;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Input(String),
    Infeasible(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
            Failure::Infeasible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Infeasible(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            PipelineError::Infeasible { .. } | PipelineError::Opf { .. } => Failure::Infeasible(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gridreduce", version, about = "Structure-preserving transmission grid reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the DC-OPF and write dispatch, flows and LMPs.
    Opf {
        case: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// List feature buses and branches.
    Features {
        case: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Run the reduction pipeline and write the reduced case, mapping and report.
    Reduce {
        case: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the pipeline once per parameter value.
    Sweep {
        case: PathBuf,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values in sweep order.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Compare original and reduced OPFs under scaled loads.
    Verify {
        original: PathBuf,
        reduced: PathBuf,
        mapping: PathBuf,
        profile: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = DEFAULT_TOLERANCE, value_parser = open_unit)]
    tolerance: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Sidecar CSV with branch lengths or generator conventionality; repeatable.
    #[arg(long = "annotations")]
    annotations: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct Thresholds {
    #[arg(long, default_value_t = 0.95, value_parser = positive)]
    loading_threshold: f64,
    #[arg(long = "length-km", default_value_t = 50.0, value_parser = nonnegative)]
    length_km: f64,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0.05, value_parser = unit_interval)]
    tau: f64,
    #[arg(long, default_value_t = 0.08, value_parser = positive)]
    delta: f64,
    #[arg(long, default_value_t = 4)]
    theta: usize,
    #[arg(long, default_value_t = 10.0, value_parser = nonnegative)]
    critical_limit_mw: f64,
    #[arg(long, default_value_t = 0.01, value_parser = fraction)]
    small_fraction: f64,
    #[arg(long, default_value_t = 5, value_parser = at_least_one)]
    max_refinement_rounds: usize,
    #[command(flatten)]
    thresholds: Thresholds,
    /// Market seeds are visited in ascending bus id; no other order exists.
    #[arg(long, value_enum, default_value_t = SeedOrder::IdAscending)]
    seed_order: SeedOrder,
    #[arg(long)]
    no_topology: bool,
    #[arg(long)]
    no_electrical: bool,
    #[arg(long)]
    no_refinement: bool,
    #[arg(long)]
    no_market: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SeedOrder {
    IdAscending,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Param {
    Tau,
    Delta,
    Theta,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    (0.0..=1.0).contains(&v).then_some(v).ok_or_else(|| format!("{v} is not in [0, 1]"))
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    (v > 0.0 && v < 1.0).then_some(v).ok_or_else(|| format!("{v} is not in (0, 1)"))
}

fn fraction(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    (v > 0.0 && v <= 1.0).then_some(v).ok_or_else(|| format!("{v} is not in (0, 1]"))
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    (v > 0.0 && v.is_finite()).then_some(v).ok_or_else(|| format!("{v} is not positive"))
}

fn at_least_one(s: &str) -> Result<usize, String> {
    let v = s.parse::<usize>().map_err(|e| e.to_string())?;
    (v >= 1).then_some(v).ok_or_else(|| "must be at least 1".to_string())
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    (v >= 0.0 && v.is_finite()).then_some(v).ok_or_else(|| format!("{v} is negative"))
}

impl PipelineArgs {
    fn config(&self, tolerance: f64) -> PipelineConfig {
        let SeedOrder::IdAscending = self.seed_order;
        PipelineConfig {
            tau: self.tau,
            delta: self.delta,
            theta: self.theta,
            critical_limit_mw: self.critical_limit_mw,
            small_fraction: self.small_fraction,
            loading_threshold: self.thresholds.loading_threshold,
            length_threshold_km: self.thresholds.length_km,
            max_refinement_rounds: self.max_refinement_rounds,
            tolerance,
            stages: StageSet {
                topology: !self.no_topology,
                electrical: !self.no_electrical,
                refinement: !self.no_refinement,
                market: !self.no_market,
            },
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_case(path: &Path, annotations: &[PathBuf]) -> Result<Grid, Failure> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
    let (mut grid, warnings) =
        parse_case_with_warnings(&read(path)?, name).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    for a in annotations {
        grid = apply_annotations(&grid, &read(a)?).map_err(|e| Failure::Input(format!("{}: {e}", a.display())))?;
    }
    Ok(grid)
}

fn write(dir: &Path, file: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Internal(format!("{}: {e}", dir.display())))?;
    let path = dir.join(file);
    fs::write(&path, contents).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn solve_optimal(grid: &Grid, tolerance: f64) -> Result<OpfSolution, Failure> {
    let sol = solve_grid(grid, tolerance).map_err(|e| Failure::Infeasible(e.to_string()))?;
    if !sol.is_optimal() {
        return Err(Failure::Infeasible(format!("OPF {}", sol.status)));
    }
    Ok(sol)
}

/// Rounds to one decimal digit coarser than the solver tolerance, so that
/// interior-point noise below the tolerance does not reach the output.
fn rounded(v: f64, tolerance: f64) -> f64 {
    let digits = (-tolerance.log10()).floor() as i32 - 1;
    let scale = 10f64.powi(digits.max(0));
    let r = (v * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn keyed_csv<'a, K: std::fmt::Display + 'a>(
    header: &str,
    rows: impl Iterator<Item = (&'a K, &'a f64)>,
    tolerance: f64,
) -> String {
    let mut out = format!("{header}\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{:?}\n", rounded(*v, tolerance)));
    }
    out
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Opf { case, common } => {
            let grid = load_case(&case, &common.annotations)?;
            let sol = solve_optimal(&grid, common.tolerance)?;
            let (dir, tol) = (&common.out_dir, common.tolerance);
            write(dir, "dispatch.csv", &keyed_csv("generator,dispatch_mw", sol.dispatch.iter(), tol))?;
            write(dir, "flows.csv", &keyed_csv("branch,flow_mw", sol.flow.iter(), tol))?;
            write(dir, "lmps.csv", &keyed_csv("bus,lmp", sol.lmp.iter(), tol))?;
            println!("objective {:?}", rounded(sol.objective, tol));
        }
        Command::Features {
            case,
            common,
            thresholds,
        } => {
            let grid = load_case(&case, &common.annotations)?;
            let sol = solve_optimal(&grid, common.tolerance)?;
            let config = FeatureConfig {
                loading_threshold: thresholds.loading_threshold,
                length_threshold_km: thresholds.length_km,
            };
            let features = identify(&grid, &sol, &config);
            write(&common.out_dir, "features.csv", &features.to_csv())?;
            println!("{} features", features.len());
        }
        Command::Reduce { case, common, pipeline } => {
            let grid = load_case(&case, &common.annotations)?;
            let (reduced, report) = run_pipeline(&grid, &pipeline.config(common.tolerance))?;
            let dir = &common.out_dir;
            write(dir, "reduced.json", &write_case(&reduced))?;
            write(dir, "mapping.csv", &write_mapping(&report.mapping))?;
            write(dir, "report.json", &write_report(&report))?;
            println!(
                "buses {} -> {} ({:.1}% removed), eps_disp {:.4}, eps_flow {:.4}",
                report.initial.buses,
                report.final_counts.buses,
                100.0 * report.bus_reduction(),
                report.eps_disp,
                report.eps_flow
            );
        }
        Command::Sweep {
            case,
            param,
            values,
            common,
            pipeline,
        } => {
            let parameter = match param {
                Param::Tau => SweepParameter::Tau,
                Param::Delta => SweepParameter::Delta,
                Param::Theta => SweepParameter::Theta,
            };
            for v in &values {
                parameter.check(*v).map_err(Failure::Usage)?;
            }
            let grid = load_case(&case, &common.annotations)?;
            let rows = sweep(&grid, &pipeline.config(common.tolerance), parameter, &values)?;
            for row in &rows {
                if let Err(e) = &row.outcome {
                    log::warn!("value {:?}: {e}", row.value);
                }
            }
            write(&common.out_dir, "sweep.csv", &sweep_to_csv(&rows))?;
        }
        Command::Verify {
            original,
            reduced,
            mapping,
            profile,
            common,
        } => {
            let a = load_case(&original, &common.annotations)?;
            let b = load_case(&reduced, &[])?;
            let m = parse_mapping(&read(&mapping)?).map_err(|e| Failure::Input(format!("{}: {e}", mapping.display())))?;
            let p = parse_profile(&read(&profile)?).map_err(|e| Failure::Input(format!("{}: {e}", profile.display())))?;
            let rows = verify_scenarios(&a, &b, &m, &p, common.tolerance).map_err(|e| Failure::Input(e.to_string()))?;
            write(&common.out_dir, "scenarios.csv", &scenarios_to_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            let mut cmd = <Cli as clap::CommandFactory>::command();
            cmd.error(clap::error::ErrorKind::ValueValidation, m).exit()
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
