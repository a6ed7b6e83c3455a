//! Command-line front end: validate scenario files, run closed-loop
//! simulations, report optimal invariant sets, and probe feasible regions.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime invariant
//! violation, 3 solver or output failure.

use cctmpc::rci::{self, MrciOptions, RciError};
use cctmpc::scenario::{Scenario, ScenarioError, ScenarioFile};
use cctmpc::sim::{self, region, SimError};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_INVARIANT: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cctmpc",
    about = "Configuration-constrained tube MPC: scenario runner and set reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file: schema, template, controller weights, and
    /// a steady-set feasibility probe at the zero reference.
    Validate {
        scenario: PathBuf,
    },
    /// Run the closed loop and write trace.csv plus summary.toml.
    Run {
        scenario: PathBuf,
        /// Replaces the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        output: PathBuf,
        /// Comma list of key=value pairs; keys: slack, settle.
        #[arg(long)]
        tolerance_overrides: Option<String>,
    },
    /// Solve the optimal invariant set for a reference and report it.
    Rci {
        scenario: PathBuf,
        /// Comma list of output values; defaults to the scenario's first
        /// reference entry.
        #[arg(long)]
        reference: Option<String>,
        /// Directory for rci.toml; omit to print only.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Probe the planar feasible region, compare it against the maximal
    /// invariant set, and write region.csv plus region.toml.
    Region {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        #[arg(long, default_value = "out")]
        output: PathBuf,
        /// Comma list of key=value pairs; keys: mrci.
        #[arg(long)]
        tolerance_overrides: Option<String>,
    },
}

#[derive(Default)]
struct Overrides {
    slack: Option<f64>,
    settle: Option<f64>,
    mrci: Option<f64>,
}

fn parse_overrides(text: &str) -> Result<Overrides, String> {
    let mut out = Overrides::default();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("override '{part}' is not key=value"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| format!("override '{part}': {e}"))?;
        if !(value > 0.0) {
            return Err(format!("override '{part}' must be positive"));
        }
        match key.trim() {
            "slack" => out.slack = Some(value),
            "settle" => out.settle = Some(value),
            "mrci" => out.mrci = Some(value),
            other => return Err(format!("unknown override key '{other}'")),
        }
    }
    Ok(out)
}

fn parse_reference(text: &str) -> Result<DVector<f64>, String> {
    let values: Result<Vec<f64>, _> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect();
    let values = values.map_err(|e| format!("reference '{text}': {e}"))?;
    if values.is_empty() {
        return Err("reference is empty".into());
    }
    Ok(DVector::from_vec(values))
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

fn scenario_failure(stage: &str, err: &ScenarioError) -> Failure {
    let code = match err {
        ScenarioError::Simulation(SimError::Solver(_)) => EXIT_SOLVER,
        ScenarioError::Cost(RciError::Solver(_)) => EXIT_SOLVER,
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, format!("{stage}: {err}"))
}

fn sim_failure(err: &SimError) -> Failure {
    match err {
        SimError::BadSetup(_) | SimError::Model(_) => {
            Failure::new(EXIT_VALIDATION, format!("setup: {err}"))
        }
        SimError::InitialInfeasible => {
            Failure::new(EXIT_INVARIANT, "step 0: controller infeasible at x0".to_string())
        }
        SimError::Solver(_) | SimError::Output(_) => {
            Failure::new(EXIT_SOLVER, err.to_string())
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let file = ScenarioFile::load(path).map_err(|e| scenario_failure("schema", &e))?;
    file.assemble().map_err(|e| scenario_failure("assembly", &e))
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let file = ScenarioFile::load(path).map_err(|e| scenario_failure("schema", &e))?;
    println!("schema: ok");
    let mut scenario = file.assemble().map_err(|e| scenario_failure("assembly", &e))?;
    println!("assembly: ok");
    for line in scenario.describe().lines() {
        println!("  {line}");
    }
    // The tracking problem is well posed only if some invariant set
    // exists; probe with the zero reference, which every admissible
    // model can weigh against.
    let zero = DVector::zeros(scenario.context.model().output_dim());
    let probe = scenario
        .context
        .optimal_rci_for(&zero)
        .map_err(|e| Failure::new(EXIT_VALIDATION, format!("steady-set probe: {e}")))?;
    println!(
        "steady-set probe: feasible at r = 0, cost {:.6}, {} solver iterations",
        probe.cost, probe.iterations
    );
    println!("validation passed");
    Ok(())
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    output: &Path,
    overrides: Option<&str>,
) -> Result<(), Failure> {
    let mut scenario = load(path)?;
    if let Some(seed) = seed {
        scenario.options.seed = seed;
    }
    if let Some(text) = overrides {
        let ov = parse_overrides(text).map_err(|m| Failure::new(EXIT_VALIDATION, m))?;
        if let Some(s) = ov.slack {
            scenario.options.slack = s;
        }
        if let Some(s) = ov.settle {
            scenario.options.settle_tolerance = s;
        }
        if ov.mrci.is_some() {
            return Err(Failure::new(
                EXIT_VALIDATION,
                "override 'mrci' only applies to the region command",
            ));
        }
    }
    let mut simulator = scenario.into_simulator().map_err(|e| sim_failure(&e))?;
    let report = simulator.run().map_err(|e| sim_failure(&e))?;

    std::fs::create_dir_all(output)
        .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", output.display())))?;
    sim::write_trace(&output.join("trace.csv"), &report).map_err(|e| sim_failure(&e))?;
    sim::write_summary(&output.join("summary.toml"), &report).map_err(|e| sim_failure(&e))?;

    let s = &report.summary;
    println!("steps: {}", s.steps_completed);
    println!("final Lyapunov value: {:.6e}", s.final_lyapunov);
    println!("max candidate violation: {:.3e}", s.max_candidate_violation);
    println!("trace: {}", output.join("trace.csv").display());
    println!("summary: {}", output.join("summary.toml").display());
    if let Some(t) = s.infeasible_at {
        return Err(Failure::new(
            EXIT_INVARIANT,
            format!("step {t}: controller infeasible mid-run"),
        ));
    }
    if !s.invariants_ok {
        return Err(Failure::new(
            EXIT_INVARIANT,
            "per-step invariant flags failed; see trace columns feasible_certified, lyapunov_ok, contained",
        ));
    }
    println!("all per-step invariants hold");
    Ok(())
}

#[derive(Serialize)]
struct RciReport {
    reference: Vec<f64>,
    cost: f64,
    iterations: u32,
    theta: Vec<f64>,
    facet_offsets: Vec<f64>,
    vertex_inputs: Vec<Vec<f64>>,
    vertices: Vec<Vec<f64>>,
}

fn cmd_rci(path: &Path, reference: Option<&str>, output: Option<&Path>) -> Result<(), Failure> {
    let mut scenario = load(path)?;
    let r = match reference {
        Some(text) => parse_reference(text).map_err(|m| Failure::new(EXIT_VALIDATION, m))?,
        None => scenario.options.reference[0].1.clone(),
    };
    if r.len() != scenario.context.model().output_dim() {
        return Err(Failure::new(
            EXIT_VALIDATION,
            format!(
                "reference has {} entries, model output dimension is {}",
                r.len(),
                scenario.context.model().output_dim()
            ),
        ));
    }
    let rci = scenario.context.optimal_rci_for(&r).map_err(|e| match e {
        cctmpc::mpc::MpcError::Rci(RciError::Infeasible) => Failure::new(
            EXIT_INVARIANT,
            "no invariant set satisfies the constraints for this template",
        ),
        other => Failure::new(EXIT_SOLVER, other.to_string()),
    })?;

    let template = scenario.context.template();
    let nu = scenario.context.model().input_dim();
    let points = template.vertex_points(&rci.y);
    let report = RciReport {
        reference: r.iter().copied().collect(),
        cost: rci.cost,
        iterations: rci.iterations,
        theta: rci.theta.iter().copied().collect(),
        facet_offsets: rci.y.iter().copied().collect(),
        vertex_inputs: (0..points.len())
            .map(|j| rci.u.rows(j * nu, nu).iter().copied().collect())
            .collect(),
        vertices: points.iter().map(|p| p.iter().copied().collect()).collect(),
    };

    println!("reference: {:?}", report.reference);
    println!("tracking cost: {:.9}", report.cost);
    println!("facet offsets: {:?}", report.facet_offsets);
    println!("steady parameter theta: {:?}", report.theta);
    for (j, (v, u)) in report.vertices.iter().zip(&report.vertex_inputs).enumerate() {
        println!("vertex {j}: x = {v:?}, u = {u:?}");
    }
    if let Some(dir) = output {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", dir.display())))?;
        let text = toml::to_string_pretty(&report)
            .map_err(|e| Failure::new(EXIT_SOLVER, e.to_string()))?;
        let file = dir.join("rci.toml");
        std::fs::write(&file, text)
            .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", file.display())))?;
        println!("report: {}", file.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct RegionReport {
    resolution: f64,
    controller_solves: usize,
    hull: Vec<[f64; 2]>,
    mrci_iterations: Option<usize>,
    mrci_final_delta: Option<f64>,
    hausdorff: Option<f64>,
}

fn write_region_files(
    output: &Path,
    estimate: &region::RegionEstimate,
    report: &RegionReport,
) -> Result<(), Failure> {
    std::fs::create_dir_all(output)
        .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", output.display())))?;
    let csv_path = output.join("region.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", csv_path.display())))?;
    let io = |e: csv::Error| Failure::new(EXIT_SOLVER, format!("{}: {e}", csv_path.display()));
    w.write_record(["x0", "x1"]).map_err(io)?;
    for (a, b) in &estimate.points {
        w.write_record([format!("{a}"), format!("{b}")]).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", csv_path.display())))?;

    let text = toml::to_string_pretty(report)
        .map_err(|e| Failure::new(EXIT_SOLVER, e.to_string()))?;
    let toml_path = output.join("region.toml");
    std::fs::write(&toml_path, text)
        .map_err(|e| Failure::new(EXIT_SOLVER, format!("{}: {e}", toml_path.display())))?;
    println!("points: {}", csv_path.display());
    println!("report: {}", toml_path.display());
    Ok(())
}

fn cmd_region(
    path: &Path,
    resolution: f64,
    output: &Path,
    overrides: Option<&str>,
) -> Result<(), Failure> {
    let scenario = load(path)?;
    let mut mrci_opts = MrciOptions::default();
    if let Some(text) = overrides {
        let ov = parse_overrides(text).map_err(|m| Failure::new(EXIT_VALIDATION, m))?;
        if ov.slack.is_some() || ov.settle.is_some() {
            return Err(Failure::new(
                EXIT_VALIDATION,
                "overrides 'slack' and 'settle' only apply to the run command",
            ));
        }
        if let Some(t) = ov.mrci {
            mrci_opts.tolerance = t;
        }
    }
    let r = scenario.options.reference[0].1.clone();
    let estimate = region::feasible_region(&scenario.context, &r, resolution)
        .map_err(|e| sim_failure(&e))?;
    println!(
        "feasible region: {} boundary points, {} hull vertices, {} controller solves",
        estimate.points.len(),
        estimate.hull.len(),
        estimate.solves
    );

    let mut report = RegionReport {
        resolution,
        controller_solves: estimate.solves,
        hull: estimate.hull.iter().map(|&(a, b)| [a, b]).collect(),
        mrci_iterations: None,
        mrci_final_delta: None,
        hausdorff: None,
    };
    let mrci = rci::approximate_maximal_rci(
        scenario.context.model(),
        scenario.context.solver(),
        mrci_opts,
    );
    match mrci {
        Ok(mrci) => {
            let distance = region::region_distance(&scenario.context, &estimate, &mrci.set)
                .map_err(|e| sim_failure(&e))?;
            report.mrci_iterations = Some(mrci.iterations);
            report.mrci_final_delta = Some(mrci.final_delta);
            report.hausdorff = Some(distance);
            println!(
                "maximal invariant set: {} iterations, final delta {:.3e}",
                mrci.iterations, mrci.final_delta
            );
            println!("Hausdorff(feasible region, maximal invariant set) = {distance:.6}");
            write_region_files(output, &estimate, &report)
        }
        Err(e @ RciError::NotConverged { .. }) => {
            write_region_files(output, &estimate, &report)?;
            Err(Failure::new(EXIT_SOLVER, format!("maximal invariant set: {e}")))
        }
        Err(e) => Err(Failure::new(EXIT_SOLVER, format!("maximal invariant set: {e}"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate { scenario } => cmd_validate(scenario),
        Command::Run { scenario, seed, output, tolerance_overrides } => {
            cmd_run(scenario, *seed, output, tolerance_overrides.as_deref())
        }
        Command::Rci { scenario, reference, output } => {
            cmd_rci(scenario, reference.as_deref(), output.as_deref())
        }
        Command::Region { scenario, resolution, output, tolerance_overrides } => {
            cmd_region(scenario, *resolution, output, tolerance_overrides.as_deref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
