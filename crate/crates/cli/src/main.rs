use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netxform::dynamics::inverse;
use netxform::io::{self, ProblemConfig};
use netxform::lie_algebra::check_feasible;
use netxform::optimal_control::{homotopy_singularity_scan, solve_with_waypoints, SolverOptions, SINGULARITY_WARNING};
use netxform::parallel::{threads_from_env, with_threads};
use netxform::scenarios::{run_densify, run_swap, DensifyConfig, SwapConfig};
use netxform::{dynamics, Error, GraphSpec};
use serde::Deserialize;

const SCAN_SAMPLES: usize = 1001;

#[derive(Parser)]
#[command(
    name = "netxform",
    version,
    about = "Compute global linear maps with local, time-varying network weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Random seed for solver restarts (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// RK4 steps per boundary value problem (overrides the config).
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, opts: &mut SolverOptions) {
        if let Some(s) = self.seed {
            opts.seed = s;
        }
        if let Some(s) = self.steps {
            opts.steps = s;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Report whether the target is computable on the graph.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize minimum-energy weights and write the solution bundle.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run node states through a schedule CSV.
    Simulate {
        /// Config whose `graph` defines the sparsity pattern.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Initial state, e.g. `1,2,3,4`.
        #[arg(
            long,
            allow_hyphen_values = true,
            conflicts_with = "xi_file",
            required_unless_present = "xi_file"
        )]
        xi: Option<String>,
        #[arg(long)]
        xi_file: Option<PathBuf>,
        /// Directory for `nodes.csv`; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a worked example end to end.
    Scenario {
        kind: Kind,
        /// Scenario config; defaults apply to every missing field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "scenario-out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Densify,
    Swap,
}

enum Failure {
    Usage(String),
    Infeasible(String),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Infeasible(r) => Failure::Infeasible(r),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn check(config: &Path) -> Outcome {
    let cfg = ProblemConfig::load(config)?;
    let report = check_feasible(&cfg.graph()?, &cfg.target_matrix()?)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.feasible {
        Ok(())
    } else {
        Err(Failure::Infeasible(report.reason))
    }
}

/// Warns about near-singular straight-line homotopies, segment by segment.
fn warn_singular(cfg: &ProblemConfig) -> Result<(), Error> {
    let mut previous = netxform::nalgebra::DMatrix::identity(cfg.graph.nodes, cfg.graph.nodes);
    let mut stops = cfg.waypoint_matrices()?;
    stops.push(cfg.target_matrix()?);
    for (k, stop) in stops.iter().enumerate() {
        let relative = stop * inverse(&previous)?;
        let (min_det, s) = homotopy_singularity_scan(&relative, SCAN_SAMPLES)?;
        if min_det < SINGULARITY_WARNING {
            let which = if stops.len() == 1 {
                String::new()
            } else {
                format!(" of segment {}", k + 1)
            };
            eprintln!(
                "warning: straight homotopy{which} from I to its target passes near a singular matrix \
                 (min |det| = {min_det:.3e} at s = {s}); consider adding a waypoint"
            );
        }
        previous = stop.clone();
    }
    Ok(())
}

fn solve(config: &Path, out: Option<PathBuf>, overrides: &Overrides) -> Outcome {
    let mut cfg = ProblemConfig::load(config)?;
    overrides.apply(&mut cfg.solver);
    let prob = cfg.problem()?;
    let waypoints = cfg.waypoint_matrices()?;
    warn_singular(&cfg)?;
    let dir = out.or(cfg.output.clone()).unwrap_or_else(|| PathBuf::from("solution"));
    let sol = with_threads(threads_from_env(), || solve_with_waypoints(&prob, &waypoints))??;
    io::write_solution_bundle(&dir, &sol)?;
    eprintln!(
        "{}: residual {:.3e}, cost {}, bundle in {}",
        if sol.converged { "converged" } else { "not converged" },
        sol.residual_norm,
        sol.cost,
        dir.display()
    );
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

#[derive(Deserialize)]
struct GraphOnly {
    graph: GraphSpec,
}

fn simulate(
    config: &Path,
    schedule: &Path,
    xi: Option<&str>,
    xi_file: Option<&Path>,
    out: Option<&Path>,
    steps: Option<usize>,
) -> Outcome {
    let spec: GraphOnly = serde_json::from_str(&read(config)?).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    let graph = spec.graph.build()?;
    let sched = io::parse_schedule_csv(&read(schedule)?, &graph.mask())?;
    let xi_text = match (xi, xi_file) {
        (Some(x), _) => x.to_string(),
        (None, Some(p)) => read(p)?,
        (None, None) => return Err(Failure::Usage("one of --xi or --xi-file is required".into())),
    };
    let xi = io::parse_vector(&xi_text)?;
    io::check_len(&xi, graph.n())?;
    let intervals: usize = sched.pieces().iter().map(|p| p.intervals()).sum();
    let steps = steps.unwrap_or(if intervals.is_multiple_of(2) {
        intervals / 2
    } else {
        intervals
    });
    let traj = dynamics::propagate_state(&sched, &xi, steps)?;
    let csv = io::nodes_csv(&traj.grid, &traj.states);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::from)?;
            fs::write(dir.join("nodes.csv"), csv).map_err(Error::from)?;
        }
        None => {
            let _ = std::io::stdout().write_all(csv.as_bytes());
        }
    }
    Ok(())
}

fn load_or_default<T: Default + for<'de> Deserialize<'de>>(config: Option<&Path>, what: &str) -> Result<T, Failure> {
    match config {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::Usage(format!("{what} config: {e}"))),
    }
}

fn scenario(kind: Kind, config: Option<&Path>, out: &Path, overrides: &Overrides) -> Outcome {
    let threads = threads_from_env();
    let converged = match kind {
        Kind::Densify => {
            let mut cfg: DensifyConfig = load_or_default(config, "densify")?;
            overrides.apply(&mut cfg.solver);
            let s = cfg.scenario()?;
            let report = with_threads(threads, || run_densify(&s, &cfg.solver))??;
            report.write(out)?;
            let last = report.grid.len() - 1;
            eprintln!(
                "densify: residual {:.3e}, terminal agreement error sparse {:.6e} dense {:.6e} synthesized {:.6e}",
                report.solution.residual_norm, report.err_sparse[last], report.err_dense[last], report.err_synth[last]
            );
            report.solution.converged
        }
        Kind::Swap => {
            let mut cfg: SwapConfig = load_or_default(config, "swap")?;
            overrides.apply(&mut cfg.solver);
            let s = cfg.scenario()?;
            let report = with_threads(threads, || run_swap(&s, &cfg.solver))??;
            report.write(out)?;
            let fin: Vec<String> = report.final_state().iter().map(|v| format!("{v:.6}")).collect();
            eprintln!(
                "swap: residual {:.3e}, final state [{}]",
                report.solution.residual_norm,
                fin.join(", ")
            );
            report.solution.converged
        }
    };
    if converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Check { config } => check(config),
        Command::Solve { config, out, overrides } => solve(config, out.clone(), overrides),
        Command::Simulate {
            config,
            schedule,
            xi,
            xi_file,
            out,
            steps,
        } => simulate(
            config,
            schedule,
            xi.as_deref(),
            xi_file.as_deref(),
            out.as_deref(),
            *steps,
        ),
        Command::Scenario {
            kind,
            config,
            out,
            overrides,
        } => scenario(*kind, config.as_deref(), out, overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible(reason)) => {
            eprintln!("infeasible: {reason}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged) => ExitCode::from(3),
    }
}
