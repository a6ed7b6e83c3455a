//! Quadratic programs and the interior-point backend.
//!
//! Problems are stated as
//!
//! ```text
//! minimize   0.5 x' H x + g' x
//! subject to l <= A x <= u
//! ```
//!
//! with `H` symmetric positive semidefinite. Rows with `l == u` are
//! equalities. Infinite bounds drop the corresponding side. The solver
//! contract: reported optima satisfy every constraint within
//! [`tol::FEASIBILITY`], the KKT stationarity residual
//! `||H x + g + A' dual||_inf` is within [`tol::STATIONARITY`], and the
//! reported objective is exact for the returned point. Dual signs follow
//! `H x + g + A' dual = 0` with `dual >= 0` on active upper bounds and
//! `dual <= 0` on active lower bounds.

use crate::registry::Registry;
use crate::sparse::SparseMat;
use crate::tol;
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("invalid problem: {0}")]
    BadProblem(String),
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("iteration limit reached before convergence")]
    MaxIterations,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Problem data. Construction validates dimensions, symmetry, and bounds,
/// so a value of this type is always well formed.
#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    hessian: SparseMat,
    linear_cost: DVector<f64>,
    constraints: SparseMat,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        hessian: SparseMat,
        linear_cost: DVector<f64>,
        constraints: SparseMat,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = linear_cost.len();
        let m = lower.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(QpError::BadProblem(format!(
                "hessian is {}x{}, expected {n}x{n}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        if constraints.nrows() != m || constraints.ncols() != n {
            return Err(QpError::BadProblem(format!(
                "constraint matrix is {}x{}, expected {m}x{n}",
                constraints.nrows(),
                constraints.ncols()
            )));
        }
        if upper.len() != m {
            return Err(QpError::BadProblem("bound length mismatch".into()));
        }
        if linear_cost.iter().any(|v| !v.is_finite()) {
            return Err(QpError::BadProblem("non-finite linear cost".into()));
        }
        let asym = hessian.asymmetry();
        if asym > tol::SYMMETRY {
            return Err(QpError::BadProblem(format!(
                "hessian asymmetry {asym:.3e} exceeds {:.0e}",
                tol::SYMMETRY
            )));
        }
        for i in 0..m {
            let (l, u) = (lower[i], upper[i]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(QpError::BadProblem(format!("row {i}: invalid bounds [{l}, {u}]")));
            }
            if l > u {
                return Err(QpError::BadProblem(format!("row {i}: lower {l} exceeds upper {u}")));
            }
        }
        Ok(Self { hessian, linear_cost, constraints, lower, upper })
    }

    pub fn num_vars(&self) -> usize {
        self.linear_cost.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.lower.len()
    }

    pub fn hessian(&self) -> &SparseMat {
        &self.hessian
    }

    pub fn linear_cost(&self) -> &DVector<f64> {
        &self.linear_cost
    }

    pub fn constraints(&self) -> &SparseMat {
        &self.constraints
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.hessian.mul_vec(x)) + self.linear_cost.dot(x)
    }

    /// Worst constraint violation at `x` (zero when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ax = self.constraints.mul_vec(x);
        let mut worst: f64 = 0.0;
        for i in 0..self.num_constraints() {
            if self.lower[i].is_finite() {
                worst = worst.max(self.lower[i] - ax[i]);
            }
            if self.upper[i].is_finite() {
                worst = worst.max(ax[i] - self.upper[i]);
            }
        }
        worst
    }

    /// `||H x + g + A' dual||_inf`.
    pub fn stationarity_residual(&self, x: &DVector<f64>, dual: &DVector<f64>) -> f64 {
        let r = self.hessian.mul_vec(x) + &self.linear_cost + self.constraints.tr_mul_vec(dual);
        r.amax()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalError,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    /// One multiplier per constraint row, combined across both bound sides.
    pub dual: DVector<f64>,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveStats {
    pub iterations: u32,
    /// Worst primal constraint violation at the returned point.
    pub feasibility_residual: f64,
    /// KKT stationarity residual at the returned point.
    pub stationarity_residual: f64,
}

#[derive(Clone, Debug)]
pub struct QpResult {
    pub status: QpStatus,
    /// Present exactly when `status == Optimal`.
    pub solution: Option<QpSolution>,
    pub stats: SolveStats,
}

impl QpResult {
    pub fn optimal(&self) -> Result<&QpSolution, QpError> {
        match self.status {
            QpStatus::Optimal => Ok(self.solution.as_ref().expect("Optimal carries a solution")),
            QpStatus::Infeasible => Err(QpError::Infeasible),
            QpStatus::Unbounded => Err(QpError::Unbounded),
            QpStatus::MaxIterations => Err(QpError::MaxIterations),
            QpStatus::NumericalError => Err(QpError::Numerical("solver reported failure".into())),
        }
    }
}

/// Primal warm start. Interior-point backends may ignore it; the contract is
/// only that warm and cold solves agree on the objective within
/// [`tol::OBJECTIVE_REL`].
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub primal: DVector<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct QpSettings {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iter: u32,
}

impl Default for QpSettings {
    fn default() -> Self {
        // The softest objective directions carry curvature around 1e-3,
        // so distinguishing optima 1e-4 apart needs a duality gap near
        // 1e-11; the relative tolerance sits at machine scale so the
        // absolute one governs. Feasibility stays at 1e-9, well inside
        // the 1e-7/1e-6 downstream checks.
        Self { tol_feas: 1e-9, tol_gap_abs: 1e-12, tol_gap_rel: 1e-14, max_iter: 500 }
    }
}

pub trait QpSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, qp: &QuadraticProgram, warm: Option<&WarmStart>) -> QpResult;
}

/// Convenience for the common "must be optimal" path.
pub fn solve_expect_optimal(
    solver: &dyn QpSolver,
    qp: &QuadraticProgram,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    let res = solver.solve(qp, warm);
    res.optimal().cloned()
}

/// Interior-point backend.
pub struct ClarabelSolver {
    settings: QpSettings,
}

impl ClarabelSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

/// Row routing from the two-sided form into the conic form: equalities
/// first (zero cone), then one row per finite upper bound and one negated
/// row per finite lower bound (nonnegative cone).
struct ConicLayout {
    eq_rows: Vec<usize>,
    up_rows: Vec<usize>,
    lo_rows: Vec<usize>,
}

impl ConicLayout {
    fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let mut eq_rows = Vec::new();
        let mut up_rows = Vec::new();
        let mut lo_rows = Vec::new();
        for i in 0..lower.len() {
            let (l, u) = (lower[i], upper[i]);
            if l == u {
                eq_rows.push(i);
            } else {
                if u.is_finite() {
                    up_rows.push(i);
                }
                if l.is_finite() {
                    lo_rows.push(i);
                }
            }
        }
        Self { eq_rows, up_rows, lo_rows }
    }
}

impl QpSolver for ClarabelSolver {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve(&self, qp: &QuadraticProgram, _warm: Option<&WarmStart>) -> QpResult {
        let n = qp.num_vars();
        let m = qp.num_constraints();
        let layout = ConicLayout::from_bounds(qp.lower(), qp.upper());
        let n_eq = layout.eq_rows.len();
        let n_ineq = layout.up_rows.len() + layout.lo_rows.len();

        // Positions of each original row inside the conic row stack.
        let mut eq_pos = vec![usize::MAX; m];
        let mut up_pos = vec![usize::MAX; m];
        let mut lo_pos = vec![usize::MAX; m];
        for (k, &i) in layout.eq_rows.iter().enumerate() {
            eq_pos[i] = k;
        }
        for (k, &i) in layout.up_rows.iter().enumerate() {
            up_pos[i] = n_eq + k;
        }
        for (k, &i) in layout.lo_rows.iter().enumerate() {
            lo_pos[i] = n_eq + layout.up_rows.len() + k;
        }

        let mut a = SparseMat::zeros(n_eq + n_ineq, n);
        for &(r, c, v) in qp.constraints().entries() {
            if eq_pos[r] != usize::MAX {
                a.push(eq_pos[r], c, v);
            }
            if up_pos[r] != usize::MAX {
                a.push(up_pos[r], c, v);
            }
            if lo_pos[r] != usize::MAX {
                a.push(lo_pos[r], c, -v);
            }
        }
        let mut b = vec![0.0f64; n_eq + n_ineq];
        for i in 0..m {
            if eq_pos[i] != usize::MAX {
                b[eq_pos[i]] = qp.upper()[i];
            }
            if up_pos[i] != usize::MAX {
                b[up_pos[i]] = qp.upper()[i];
            }
            if lo_pos[i] != usize::MAX {
                b[lo_pos[i]] = -qp.lower()[i];
            }
        }

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if n_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_eq));
        }
        if n_ineq > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
        }

        let p: CscMatrix<f64> = qp.hessian().to_csc();
        let a_csc: CscMatrix<f64> = a.to_csc();
        let q: Vec<f64> = qp.linear_cost().iter().copied().collect();

        // Accuracy ladder: ask for the configured gap first, then retry
        // at looser rungs. States parked exactly on facet boundaries make
        // the KKT system near singular, where the tightest gap is
        // unreachable; a looser certificate is still far inside every
        // downstream tolerance. Infeasibility certificates are conclusive
        // at any rung, so those return immediately.
        let rungs = [
            (self.settings.tol_gap_abs, self.settings.tol_gap_rel),
            (1e-9, 1e-9),
            (1e-7, 1e-7),
        ];
        let mut solver = None;
        let mut iterations = 0;
        let mut status = QpStatus::NumericalError;
        for (i, (gap_abs, gap_rel)) in rungs.into_iter().enumerate() {
            if i > 0 && gap_abs <= self.settings.tol_gap_abs {
                continue;
            }
            let settings = DefaultSettingsBuilder::default()
                .verbose(false)
                .max_iter(self.settings.max_iter)
                .tol_feas(self.settings.tol_feas)
                .tol_gap_abs(gap_abs)
                .tol_gap_rel(gap_rel)
                .build()
                .expect("static settings are valid");

            let mut attempt = match DefaultSolver::new(&p, &q, &a_csc, &b, &cones, settings) {
                Ok(s) => s,
                Err(_) => {
                    return QpResult {
                        status: QpStatus::NumericalError,
                        solution: None,
                        stats: SolveStats {
                            iterations: 0,
                            feasibility_residual: f64::NAN,
                            stationarity_residual: f64::NAN,
                        },
                    };
                }
            };
            attempt.solve();

            iterations += attempt.solution.iterations;
            status = match attempt.solution.status {
                SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
                SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                    QpStatus::Infeasible
                }
                SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                    QpStatus::Unbounded
                }
                SolverStatus::MaxIterations | SolverStatus::MaxTime => QpStatus::MaxIterations,
                _ => QpStatus::NumericalError,
            };
            if !matches!(status, QpStatus::Optimal | QpStatus::Infeasible | QpStatus::Unbounded) {
                // A stalled run still returns its last iterate. The status
                // is advisory; the certificate is not. Accept the iterate
                // when it verifies directly.
                let primal = DVector::from_column_slice(&attempt.solution.x);
                let feas = qp.max_violation(&primal);
                let gap = (attempt.solution.obj_val - attempt.solution.obj_val_dual).abs();
                let gap_ok = gap <= 1e-8f64.max(1e-8 * attempt.solution.obj_val.abs());
                if feas <= 1e-8 && gap_ok {
                    status = QpStatus::Optimal;
                }
            }
            solver = Some(attempt);
            if matches!(status, QpStatus::Optimal | QpStatus::Infeasible | QpStatus::Unbounded) {
                break;
            }
        }
        let solver = solver.expect("at least one rung runs");

        if status != QpStatus::Optimal {
            return QpResult {
                status,
                solution: None,
                stats: SolveStats {
                    iterations,
                    feasibility_residual: f64::NAN,
                    stationarity_residual: f64::NAN,
                },
            };
        }

        let primal = DVector::from_column_slice(&solver.solution.x);
        let z = &solver.solution.z;
        let mut dual = DVector::zeros(m);
        for i in 0..m {
            if eq_pos[i] != usize::MAX {
                dual[i] = z[eq_pos[i]];
            } else {
                let up = if up_pos[i] != usize::MAX { z[up_pos[i]] } else { 0.0 };
                let lo = if lo_pos[i] != usize::MAX { z[lo_pos[i]] } else { 0.0 };
                dual[i] = up - lo;
            }
        }
        let objective = qp.objective_value(&primal);
        let stats = SolveStats {
            iterations,
            feasibility_residual: qp.max_violation(&primal),
            stationarity_residual: qp.stationarity_residual(&primal, &dual),
        };
        QpResult {
            status: QpStatus::Optimal,
            solution: Some(QpSolution { primal, dual, objective }),
            stats,
        }
    }
}

/// Backend registry keyed by name.
pub fn solver_registry() -> Registry<QpSettings, dyn QpSolver> {
    let mut reg: Registry<QpSettings, dyn QpSolver> = Registry::new();
    reg.register("clarabel", |s| Ok(Box::new(ClarabelSolver::new(*s))));
    reg
}

pub fn make_solver(name: &str, settings: QpSettings) -> Result<Box<dyn QpSolver>, QpError> {
    solver_registry().create(name, &settings).map_err(QpError::BadProblem)
}
