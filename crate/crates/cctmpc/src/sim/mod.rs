//! Closed-loop simulation with per-step certificates.
//!
//! Each step solves the controller, interpolates the vertex inputs at the
//! measured state, realizes the uncertain plant and disturbance through
//! pluggable policies, and then checks the properties the method promises:
//! the shifted candidate remains feasible at the successor state, the
//! successor lands in the predicted cross-section, and the tracking
//! Lyapunov value stays nonnegative and nonincreasing between reference
//! changes. Violations are recorded, never silently dropped.

pub mod policy;
pub mod region;

use crate::model::{LpvScheduler, ModelError};
use crate::mpc::{ControllerContext, MpcError};
use crate::qp::QpError;
use crate::rci::RciError;
use crate::vertex_control::{control_input, interpolation_weights, VertexControlError};
use nalgebra::{DMatrix, DVector};
use policy::{
    disturbance_registry, plant_registry, DisturbanceContext, DisturbancePolicy, PlantPolicy,
    PolicyInit,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    BadSetup(String),
    #[error("controller infeasible at the initial state")]
    InitialInfeasible,
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("trace output failed: {0}")]
    Output(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<MpcError> for SimError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::Infeasible => SimError::Solver("unexpected infeasibility".into()),
            other => SimError::Solver(other.to_string()),
        }
    }
}

impl From<QpError> for SimError {
    fn from(e: QpError) -> Self {
        SimError::Solver(e.to_string())
    }
}

impl From<RciError> for SimError {
    fn from(e: RciError) -> Self {
        SimError::Solver(e.to_string())
    }
}

impl From<VertexControlError> for SimError {
    fn from(e: VertexControlError) -> Self {
        SimError::Solver(e.to_string())
    }
}

/// Run-length and policy configuration of a closed-loop run.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub steps: usize,
    pub x0: DVector<f64>,
    pub seed: u64,
    /// Piecewise-constant reference: `(start time, value)` pairs, first at
    /// time zero, strictly increasing.
    pub reference: Vec<(usize, DVector<f64>)>,
    pub disturbance_policy: String,
    pub plant_policy: String,
    /// Parameter-range restrictions applied at the given times; requires a
    /// scheduler.
    pub lpv_schedule: Vec<(usize, (f64, f64))>,
    /// Slack for the per-step certificates.
    pub slack: f64,
    /// Lyapunov threshold below which a segment counts as settled.
    pub settle_tolerance: f64,
}

impl SimOptions {
    pub fn new(steps: usize, x0: DVector<f64>, reference: Vec<(usize, DVector<f64>)>) -> Self {
        Self {
            steps,
            x0,
            seed: 0,
            reference,
            disturbance_policy: "zero".into(),
            plant_policy: "vertex".into(),
            lpv_schedule: Vec::new(),
            slack: 1e-6,
            settle_tolerance: 1e-2,
        }
    }
}

/// One simulated step, everything needed to replay or audit it.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub reference: DVector<f64>,
    pub x: DVector<f64>,
    pub output: DVector<f64>,
    pub input: DVector<f64>,
    pub disturbance: DVector<f64>,
    pub realized_a: DMatrix<f64>,
    pub realized_b: DMatrix<f64>,
    pub lambda: DVector<f64>,
    /// Predicted cross-section parameters along the horizon, `y_0..y_N`.
    /// Kept in memory for certificate audits; not part of the CSV trace.
    pub y_predicted: Vec<DVector<f64>>,
    pub y_steady: DVector<f64>,
    pub u_steady: DVector<f64>,
    pub objective: f64,
    pub rci_cost: f64,
    pub lyapunov: f64,
    pub iterations: u32,
    pub feasibility_residual: f64,
    /// Worst violation of the shifted candidate at the successor state;
    /// nonpositive certifies feasibility of the next step.
    pub candidate_violation: f64,
    /// Worst violation of `F x_next <= y_1`.
    pub containment_violation: f64,
    pub feasible_certified: bool,
    pub lyapunov_ok: bool,
    pub contained: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentSummary {
    pub start: usize,
    pub end: usize,
    pub reference: Vec<f64>,
    pub initial_lyapunov: f64,
    pub final_lyapunov: f64,
    pub settled_at: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimSummary {
    pub steps_completed: usize,
    pub completed: bool,
    pub infeasible_at: Option<usize>,
    pub invariants_ok: bool,
    pub max_candidate_violation: f64,
    pub max_lyapunov_increase: f64,
    pub min_lyapunov: f64,
    pub final_lyapunov: f64,
    pub segments: Vec<SegmentSummary>,
}

#[derive(Clone, Debug)]
pub struct SimReport {
    pub records: Vec<StepRecord>,
    pub summary: SimSummary,
}

/// Closed-loop driver owning the controller, the policies, and the rng.
pub struct Simulator {
    ctx: ControllerContext,
    scheduler: Option<LpvScheduler>,
    opts: SimOptions,
    dpolicy: Box<dyn DisturbancePolicy>,
    ppolicy: Box<dyn PlantPolicy>,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(
        ctx: ControllerContext,
        scheduler: Option<LpvScheduler>,
        opts: SimOptions,
    ) -> Result<Self, SimError> {
        if opts.steps == 0 {
            return Err(SimError::BadSetup("simulation needs at least one step".into()));
        }
        if opts.x0.len() != ctx.model().state_dim() {
            return Err(SimError::BadSetup(format!(
                "initial state has dimension {}, model expects {}",
                opts.x0.len(),
                ctx.model().state_dim()
            )));
        }
        if opts.reference.is_empty() || opts.reference[0].0 != 0 {
            return Err(SimError::BadSetup(
                "reference schedule must start at time zero".into(),
            ));
        }
        for pair in opts.reference.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(SimError::BadSetup(
                    "reference schedule times must be strictly increasing".into(),
                ));
            }
        }
        for (_, r) in &opts.reference {
            if r.len() != ctx.model().output_dim() {
                return Err(SimError::BadSetup(format!(
                    "reference has dimension {}, model output is {}",
                    r.len(),
                    ctx.model().output_dim()
                )));
            }
        }
        for pair in opts.lpv_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(SimError::BadSetup(
                    "parameter schedule times must be strictly increasing".into(),
                ));
            }
        }
        if !opts.lpv_schedule.is_empty() && scheduler.is_none() {
            return Err(SimError::BadSetup(
                "parameter schedule given but the model has no scheduler".into(),
            ));
        }
        if !(opts.slack > 0.0) {
            return Err(SimError::BadSetup("certificate slack must be positive".into()));
        }

        let init = PolicyInit::for_model_with(ctx.model(), ctx.solver())
            .map_err(|e| SimError::BadSetup(format!("disturbance set: {e}")))?;
        let dpolicy = disturbance_registry()
            .create(&opts.disturbance_policy, &init)
            .map_err(SimError::BadSetup)?;
        let ppolicy = plant_registry()
            .create(&opts.plant_policy, &init)
            .map_err(SimError::BadSetup)?;
        let rng = ChaCha8Rng::seed_from_u64(opts.seed);
        Ok(Self { ctx, scheduler, opts, dpolicy, ppolicy, rng })
    }

    pub fn context(&self) -> &ControllerContext {
        &self.ctx
    }

    fn reference_at(&self, t: usize) -> DVector<f64> {
        let mut r = self.opts.reference[0].1.clone();
        for (start, value) in &self.opts.reference {
            if *start <= t {
                r = value.clone();
            }
        }
        r
    }

    /// Runs the closed loop. Infeasibility after the first step ends the
    /// run early and is reported in the summary; it is a certified-property
    /// violation, not an error of the driver.
    pub fn run(&mut self) -> Result<SimReport, SimError> {
        let nu = self.ctx.model().input_dim();
        let mut x = self.opts.x0.clone();
        let mut records: Vec<StepRecord> = Vec::with_capacity(self.opts.steps);
        let mut warm = None;
        let mut infeasible_at = None;
        let mut prev: Option<(DVector<f64>, f64)> = None;
        let mut lpv_events = self.opts.lpv_schedule.iter().peekable();

        for t in 0..self.opts.steps {
            while let Some((et, range)) = lpv_events.peek() {
                if *et > t {
                    break;
                }
                let sch = self.scheduler.as_ref().expect("schedule without scheduler");
                let restricted = sch.restrict(*range, self.ctx.solver())?;
                let model = self.ctx.model().with_vertices(restricted.vertex_pairs())?;
                self.ctx.refresh_dynamics(model)?;
                self.scheduler = Some(restricted);
                lpv_events.next();
            }

            let r = self.reference_at(t);
            let sol = match self.ctx.solve(&x, &r, warm.as_ref()) {
                Ok(s) => s,
                Err(MpcError::Infeasible) => {
                    if t == 0 {
                        return Err(SimError::InitialInfeasible);
                    }
                    infeasible_at = Some(t);
                    break;
                }
                Err(e) => return Err(SimError::Solver(format!("step {t}: {e}"))),
            };

            let interp =
                interpolation_weights(self.ctx.template(), &sol.y[0], &x, self.ctx.solver())
                    .map_err(|e| SimError::Solver(format!("step {t}: {e}")))?;
            let u = control_input(&interp.weights, &sol.u[0], nu);

            let (ra, rb) =
                self.ppolicy
                    .realize(t, self.ctx.model(), self.scheduler.as_ref(), &mut self.rng);
            let dctx = DisturbanceContext {
                t,
                x: &x,
                input: &u,
                realized_a: &ra,
                realized_b: &rb,
                facets: self.ctx.template().facets(),
                next_param: &sol.y[1],
            };
            let w = self.dpolicy.draw(&dctx, &mut self.rng);
            let x_next = &ra * &x + &rb * &u + &w;

            let candidate = self.ctx.shifted_candidate(&sol);
            let cand_viol = candidate.worst_violation(
                self.ctx.sblock(),
                self.ctx.template(),
                self.ctx.config().gamma,
                &x_next,
            );
            let contain = self.ctx.template().facets() * &x_next - &candidate.y[0];
            let containment_violation = contain.max();

            let rci_cost = self.ctx.optimal_rci_for(&r)?.cost;
            let lyapunov = sol.objective - rci_cost;
            let slack = self.opts.slack;
            let decreasing = match &prev {
                Some((pr, pl)) if pr == &r => lyapunov <= pl + slack,
                _ => true,
            };
            let lyapunov_ok = lyapunov >= -slack && decreasing;

            let output = self.ctx.model().output_c() * &x + self.ctx.model().output_d() * &u;
            records.push(StepRecord {
                t,
                reference: r.clone(),
                x: x.clone(),
                output,
                input: u,
                disturbance: w,
                realized_a: ra,
                realized_b: rb,
                lambda: interp.weights,
                y_predicted: sol.y.clone(),
                y_steady: sol.y_s.clone(),
                u_steady: sol.u_s.clone(),
                objective: sol.objective,
                rci_cost,
                lyapunov,
                iterations: sol.stats.iterations,
                feasibility_residual: sol.stats.feasibility_residual,
                candidate_violation: cand_viol,
                containment_violation,
                feasible_certified: cand_viol <= slack,
                lyapunov_ok,
                contained: containment_violation <= slack,
            });

            warm = Some(candidate.as_warm_start(self.ctx.layout()));
            prev = Some((r, lyapunov));
            x = x_next;
        }

        let summary = summarize(&records, &self.opts, infeasible_at);
        Ok(SimReport { records, summary })
    }
}

fn summarize(
    records: &[StepRecord],
    opts: &SimOptions,
    infeasible_at: Option<usize>,
) -> SimSummary {
    let mut max_cand: f64 = f64::NEG_INFINITY;
    let mut min_lyap: f64 = f64::INFINITY;
    let mut max_increase: f64 = f64::NEG_INFINITY;
    let mut invariants_ok = infeasible_at.is_none();
    for (i, rec) in records.iter().enumerate() {
        max_cand = max_cand.max(rec.candidate_violation);
        min_lyap = min_lyap.min(rec.lyapunov);
        if i > 0 && records[i - 1].reference == rec.reference {
            max_increase = max_increase.max(rec.lyapunov - records[i - 1].lyapunov);
        }
        invariants_ok &= rec.feasible_certified && rec.lyapunov_ok && rec.contained;
    }
    let mut segments = Vec::new();
    if !records.is_empty() {
        let mut start = 0usize;
        for i in 1..=records.len() {
            let boundary =
                i == records.len() || records[i].reference != records[start].reference;
            if boundary {
                let seg = &records[start..i];
                let settled_at = seg
                    .iter()
                    .find(|r| r.lyapunov <= opts.settle_tolerance)
                    .map(|r| r.t);
                segments.push(SegmentSummary {
                    start: seg[0].t,
                    end: seg[seg.len() - 1].t,
                    reference: seg[0].reference.iter().copied().collect(),
                    initial_lyapunov: seg[0].lyapunov,
                    final_lyapunov: seg[seg.len() - 1].lyapunov,
                    settled_at,
                });
                start = i;
            }
        }
    }
    SimSummary {
        steps_completed: records.len(),
        completed: infeasible_at.is_none() && records.len() == opts.steps,
        infeasible_at,
        invariants_ok,
        max_candidate_violation: if max_cand.is_finite() { max_cand } else { 0.0 },
        max_lyapunov_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
        min_lyapunov: if min_lyap.is_finite() { min_lyap } else { 0.0 },
        final_lyapunov: records.last().map(|r| r.lyapunov).unwrap_or(0.0),
        segments,
    }
}

/// Writes the trace as CSV. Column order: `t`, reference, state, output,
/// applied input, disturbance, interpolation weights, realized `A`
/// (row-major), realized `B` (row-major), objective, invariant-set cost,
/// Lyapunov value, solver iterations, solver feasibility residual,
/// candidate violation, containment violation, and the three certificate
/// flags as 0/1.
pub fn write_trace(path: &Path, report: &SimReport) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| SimError::Output(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| SimError::Output(format!("{}: {e}", path.display()));

    let first = match report.records.first() {
        Some(f) => f,
        None => {
            w.write_record(["t"]).map_err(io_err)?;
            w.flush().map_err(|e| SimError::Output(e.to_string()))?;
            return Ok(());
        }
    };
    let mut header: Vec<String> = vec!["t".into()];
    let push_group = |header: &mut Vec<String>, prefix: &str, len: usize| {
        for i in 0..len {
            header.push(format!("{prefix}{i}"));
        }
    };
    push_group(&mut header, "r", first.reference.len());
    push_group(&mut header, "x", first.x.len());
    push_group(&mut header, "z", first.output.len());
    push_group(&mut header, "u", first.input.len());
    push_group(&mut header, "w", first.disturbance.len());
    push_group(&mut header, "lambda", first.lambda.len());
    for r in 0..first.realized_a.nrows() {
        for c in 0..first.realized_a.ncols() {
            header.push(format!("a{r}{c}"));
        }
    }
    for r in 0..first.realized_b.nrows() {
        for c in 0..first.realized_b.ncols() {
            header.push(format!("b{r}{c}"));
        }
    }
    header.extend(
        [
            "objective",
            "rci_cost",
            "lyapunov",
            "iterations",
            "feasibility_residual",
            "candidate_violation",
            "containment_violation",
            "feasible_certified",
            "lyapunov_ok",
            "contained",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(io_err)?;

    for rec in &report.records {
        let mut row: Vec<String> = vec![rec.t.to_string()];
        let push_vec = |row: &mut Vec<String>, v: &DVector<f64>| {
            for val in v.iter() {
                row.push(val.to_string());
            }
        };
        push_vec(&mut row, &rec.reference);
        push_vec(&mut row, &rec.x);
        push_vec(&mut row, &rec.output);
        push_vec(&mut row, &rec.input);
        push_vec(&mut row, &rec.disturbance);
        push_vec(&mut row, &rec.lambda);
        for r in 0..rec.realized_a.nrows() {
            for c in 0..rec.realized_a.ncols() {
                row.push(rec.realized_a[(r, c)].to_string());
            }
        }
        for r in 0..rec.realized_b.nrows() {
            for c in 0..rec.realized_b.ncols() {
                row.push(rec.realized_b[(r, c)].to_string());
            }
        }
        row.push(rec.objective.to_string());
        row.push(rec.rci_cost.to_string());
        row.push(rec.lyapunov.to_string());
        row.push(rec.iterations.to_string());
        row.push(rec.feasibility_residual.to_string());
        row.push(rec.candidate_violation.to_string());
        row.push(rec.containment_violation.to_string());
        row.push((rec.feasible_certified as u8).to_string());
        row.push((rec.lyapunov_ok as u8).to_string());
        row.push((rec.contained as u8).to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| SimError::Output(e.to_string()))?;
    Ok(())
}

/// Writes the run summary as TOML.
pub fn write_summary(path: &Path, report: &SimReport) -> Result<(), SimError> {
    let text = toml::to_string_pretty(&report.summary)
        .map_err(|e| SimError::Output(e.to_string()))?;
    std::fs::write(path, text)
        .map_err(|e| SimError::Output(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HPolytope, TemplateConfig};
    use crate::model::{steady_state_basis, UncertainModel};
    use crate::mpc::MpcConfig;
    use crate::qp::ClarabelSolver;
    use crate::rci::{self, RciWeights};
    use nalgebra::{dmatrix, dvector};

    fn context() -> ControllerContext {
        let a1 = dmatrix![0.5, 0.1; 0.0, 0.6];
        let a2 = dmatrix![0.6, 0.0; 0.1, 0.5];
        let b = dmatrix![0.2; 0.8];
        let model = UncertainModel::new(
            vec![(a1, b.clone()), (a2, b)],
            dmatrix![1.0, 0.0],
            dmatrix![0.0],
            HPolytope::from_box(&dvector![-4.0, -4.0], &dvector![4.0, 4.0]).unwrap(),
            HPolytope::from_box(&dvector![-2.0], &dvector![2.0]).unwrap(),
            HPolytope::from_box(&dvector![-0.02, -0.02], &dvector![0.02, 0.02]).unwrap(),
        )
        .unwrap();
        let f = nalgebra::DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        );
        let solver = ClarabelSolver::default();
        let template =
            TemplateConfig::derive(f, DVector::from_element(4, 1.0), &solver).unwrap();
        let basis = steady_state_basis(&model).unwrap();
        let weights = RciWeights {
            vertex: nalgebra::DMatrix::identity(3, 3) * 10.0,
            center: nalgebra::DMatrix::identity(3, 3),
            reference: nalgebra::DMatrix::from_element(1, 1, 100.0),
        };
        let cost = rci::assemble_cost(&model, &template, &basis, &weights).unwrap();
        let cfg = MpcConfig::from_shape_cost(4, 0.95, &cost, 1e-3).unwrap();
        ControllerContext::new(model, template, &basis, &weights, cfg, Box::new(solver))
            .unwrap()
    }

    fn base_options() -> SimOptions {
        SimOptions::new(
            12,
            dvector![0.8, -0.5],
            vec![(0, dvector![0.3]), (6, dvector![-0.2])],
        )
    }

    #[test]
    fn setup_rejects_bad_schedules() {
        let opts = SimOptions {
            reference: vec![(3, dvector![0.0])],
            ..base_options()
        };
        match Simulator::new(context(), None, opts) {
            Err(SimError::BadSetup(msg)) => assert!(msg.contains("time zero"), "{msg}"),
            other => panic!("expected setup rejection, got {:?}", other.err()),
        }
        let opts = SimOptions {
            lpv_schedule: vec![(4, (1.0, 2.0))],
            ..base_options()
        };
        match Simulator::new(context(), None, opts) {
            Err(SimError::BadSetup(msg)) => assert!(msg.contains("scheduler"), "{msg}"),
            other => panic!("expected setup rejection, got {:?}", other.err()),
        }
    }

    #[test]
    fn closed_loop_certifies_every_step() {
        let mut opts = base_options();
        opts.disturbance_policy = "uniform".into();
        opts.plant_policy = "random".into();
        opts.seed = 42;
        let mut sim = Simulator::new(context(), None, opts).unwrap();
        let report = sim.run().unwrap();
        assert!(report.summary.completed);
        assert!(report.summary.invariants_ok, "{:#?}", report.summary);
        assert_eq!(report.records.len(), 12);
        // Lyapunov decreases within each segment and resets at the change.
        for seg in &report.summary.segments {
            assert!(seg.final_lyapunov <= seg.initial_lyapunov + 1e-6);
        }
        assert_eq!(report.summary.segments.len(), 2);
    }

    #[test]
    fn adversarial_extremes_stay_certified() {
        let mut opts = base_options();
        opts.steps = 10;
        opts.disturbance_policy = "adversarial".into();
        opts.plant_policy = "vertex".into();
        opts.seed = 7;
        let mut sim = Simulator::new(context(), None, opts).unwrap();
        let report = sim.run().unwrap();
        assert!(report.summary.completed);
        assert!(report.summary.invariants_ok, "{:#?}", report.summary);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut opts = base_options();
        opts.disturbance_policy = "uniform".into();
        opts.plant_policy = "random".into();
        opts.seed = 9;
        let run = |opts: &SimOptions| {
            let mut sim = Simulator::new(context(), None, opts.clone()).unwrap();
            sim.run().unwrap()
        };
        let a = run(&opts);
        let b = run(&opts);
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.x, rb.x);
            assert_eq!(ra.disturbance, rb.disturbance);
            assert_eq!(ra.input, rb.input);
        }
    }

    #[test]
    fn trace_files_round_trip() {
        let mut opts = base_options();
        opts.steps = 4;
        let mut sim = Simulator::new(context(), None, opts).unwrap();
        let report = sim.run().unwrap();
        let dir = std::env::temp_dir().join(format!("cctmpc-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let trace = dir.join("trace.csv");
        let summary = dir.join("summary.toml");
        write_trace(&trace, &report).unwrap();
        write_summary(&summary, &report).unwrap();
        let text = std::fs::read_to_string(&trace).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,r0,x0,x1,z0,u0,w0,w1,lambda0"), "{header}");
        assert_eq!(lines.count(), 4);
        let stext = std::fs::read_to_string(&summary).unwrap();
        assert!(stext.contains("invariants_ok = true"), "{stext}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
