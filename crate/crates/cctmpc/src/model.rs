//! Uncertain dynamics, steady-state parameterization, and LPV scheduling.
//!
//! The plant is `x+ = A x + B u + w` with `(A, B)` drawn from the convex
//! hull of finitely many vertex pairs, `w` from a compact disturbance set,
//! and output `z = C x + D u`. The steady-state basis spans all nominal
//! `(x, u)` fixed points of the mean dynamics; the scheduler maintains a
//! shrinking parameter hull for models whose vertex matrices depend
//! affinely on a measurable parameter and its reciprocal.

use crate::geometry::{hull2d, GeometryError, HPolytope};
use crate::qp::{QpError, QpSolver};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("steady-state basis has dimension {got}, expected {expected}; mean dynamics are rank deficient")]
    RankDeficient { expected: usize, got: usize },
    #[error("parameter range [{new_lo}, {new_hi}] is not nested in [{cur_lo}, {cur_hi}]")]
    RangeNotNested { new_lo: f64, new_hi: f64, cur_lo: f64, cur_hi: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Polytopic uncertain model with state, input, and disturbance sets.
#[derive(Clone, Debug)]
pub struct UncertainModel {
    vertices: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    output_c: DMatrix<f64>,
    output_d: DMatrix<f64>,
    state_set: HPolytope,
    input_set: HPolytope,
    disturbance_set: HPolytope,
}

impl UncertainModel {
    pub fn new(
        vertices: Vec<(DMatrix<f64>, DMatrix<f64>)>,
        output_c: DMatrix<f64>,
        output_d: DMatrix<f64>,
        state_set: HPolytope,
        input_set: HPolytope,
        disturbance_set: HPolytope,
    ) -> Result<Self, ModelError> {
        let Some((a0, b0)) = vertices.first() else {
            return Err(ModelError::Invalid("at least one dynamics vertex required".into()));
        };
        let nx = a0.nrows();
        let nu = b0.ncols();
        for (i, (a, b)) in vertices.iter().enumerate() {
            if a.nrows() != nx || a.ncols() != nx || b.nrows() != nx || b.ncols() != nu {
                return Err(ModelError::Dimension(format!(
                    "vertex {i}: A is {}x{}, B is {}x{}, expected {nx}x{nx} and {nx}x{nu}",
                    a.nrows(), a.ncols(), b.nrows(), b.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!("vertex {i} has non-finite entries")));
            }
        }
        if output_c.ncols() != nx {
            return Err(ModelError::Dimension("output matrix C has wrong column count".into()));
        }
        if output_d.nrows() != output_c.nrows() || output_d.ncols() != nu {
            return Err(ModelError::Dimension("output matrix D has wrong shape".into()));
        }
        if state_set.dim() != nx {
            return Err(ModelError::Dimension("state set dimension mismatch".into()));
        }
        if input_set.dim() != nu {
            return Err(ModelError::Dimension("input set dimension mismatch".into()));
        }
        if disturbance_set.dim() != nx {
            return Err(ModelError::Dimension("disturbance set dimension mismatch".into()));
        }
        Ok(Self { vertices, output_c, output_d, state_set, input_set, disturbance_set })
    }

    /// LP-backed checks: every set nonempty, disturbance set bounded.
    pub fn validate(&self, solver: &dyn QpSolver) -> Result<(), ModelError> {
        if self.state_set.is_empty(solver)? {
            return Err(ModelError::Invalid("state set is empty".into()));
        }
        if self.input_set.is_empty(solver)? {
            return Err(ModelError::Invalid("input set is empty".into()));
        }
        if self.disturbance_set.is_empty(solver)? {
            return Err(ModelError::Invalid("disturbance set is empty".into()));
        }
        if !self.disturbance_set.is_bounded(solver)? {
            return Err(ModelError::Invalid("disturbance set is unbounded".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.vertices[0].0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.vertices[0].1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.output_c.nrows()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[(DMatrix<f64>, DMatrix<f64>)] {
        &self.vertices
    }

    pub fn output_c(&self) -> &DMatrix<f64> {
        &self.output_c
    }

    pub fn output_d(&self) -> &DMatrix<f64> {
        &self.output_d
    }

    pub fn state_set(&self) -> &HPolytope {
        &self.state_set
    }

    pub fn input_set(&self) -> &HPolytope {
        &self.input_set
    }

    pub fn disturbance_set(&self) -> &HPolytope {
        &self.disturbance_set
    }

    /// Mean vertex pair; the nominal dynamics used for steady states.
    pub fn mean_pair(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let nx = self.state_dim();
        let nu = self.input_dim();
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        for (ai, bi) in &self.vertices {
            a += ai;
            b += bi;
        }
        let p = self.vertices.len() as f64;
        (a / p, b / p)
    }

    /// Replaces the dynamics vertices, keeping outputs and sets. Used by
    /// the LPV scheduler when the parameter hull shrinks.
    pub fn with_vertices(
        &self,
        vertices: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    ) -> Result<Self, ModelError> {
        Self::new(
            vertices,
            self.output_c.clone(),
            self.output_d.clone(),
            self.state_set.clone(),
            self.input_set.clone(),
            self.disturbance_set.clone(),
        )
    }

    /// Evaluates `x+ = A x + B u + w` for a realized vertex combination.
    pub fn step(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        a * x + b * u + w
    }
}

/// Orthonormal basis of the nominal steady-state subspace
/// `{(x, u) : (A_mean - I) x + B_mean u = 0}`.
#[derive(Clone, Debug)]
pub struct SteadyStateBasis {
    basis: DMatrix<f64>,
    nx: usize,
    nu: usize,
}

impl SteadyStateBasis {
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Number of basis columns.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Rows mapping the basis coordinate to the steady state.
    pub fn state_part(&self) -> DMatrix<f64> {
        self.basis.rows(0, self.nx).into_owned()
    }

    /// Rows mapping the basis coordinate to the steady input.
    pub fn input_part(&self) -> DMatrix<f64> {
        self.basis.rows(self.nx, self.nu).into_owned()
    }

    /// `[C D] * basis`: output reachable per basis coordinate.
    pub fn output_map(&self, model: &UncertainModel) -> DMatrix<f64> {
        model.output_c() * self.state_part() + model.output_d() * self.input_part()
    }
}

/// Computes the steady-state basis of the mean dynamics. The nullity of
/// `[A_mean - I, B_mean]` must equal the input dimension; anything else
/// means steady states are not freely parameterized by the input.
pub fn steady_state_basis(model: &UncertainModel) -> Result<SteadyStateBasis, ModelError> {
    let nx = model.state_dim();
    let nu = model.input_dim();
    let (a, b) = model.mean_pair();
    let mut k = DMatrix::zeros(nx, nx + nu);
    k.view_mut((0, 0), (nx, nx)).copy_from(&(a - DMatrix::identity(nx, nx)));
    k.view_mut((0, nx), (nx, nu)).copy_from(&b);

    // Nullspace from the spectral decomposition of K'K: eigenvectors whose
    // eigenvalue is negligible relative to the largest. Forming the Gram
    // matrix leaves roundoff of order eps * lambda_max in the null
    // directions, so the cutoff sits well above that and well below any
    // structural eigenvalue.
    let gram = k.transpose() * &k;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let lambda_max = eig.eigenvalues.amax().max(1e-300);
    let mut cols: Vec<usize> = (0..nx + nu)
        .filter(|&i| eig.eigenvalues[i] <= 1e-12 * lambda_max)
        .collect();
    if cols.len() != nu {
        return Err(ModelError::RankDeficient { expected: nu, got: cols.len() });
    }
    // Deterministic order and orientation.
    cols.sort();
    let mut basis = DMatrix::zeros(nx + nu, nu);
    for (c, &i) in cols.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let lead = col.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            col = -col;
        }
        basis.column_mut(c).copy_from(&col);
    }

    // Certify the basis before handing it out.
    let residual = (&k * &basis).amax();
    if residual > 1e-9 {
        return Err(ModelError::Invalid(format!(
            "steady-state basis residual {residual:.3e} exceeds 1e-9"
        )));
    }
    let gram = basis.transpose() * &basis;
    if (gram - DMatrix::identity(nu, nu)).amax() > 1e-9 {
        return Err(ModelError::Invalid("steady-state basis is not orthonormal".into()));
    }
    Ok(SteadyStateBasis { basis, nx, nu })
}

/// Per-facet disturbance margin `d_i = max_{w in W} F_i w`.
pub fn disturbance_bound(
    model: &UncertainModel,
    facets: &DMatrix<f64>,
    solver: &dyn QpSolver,
) -> Result<DVector<f64>, ModelError> {
    if facets.ncols() != model.state_dim() {
        return Err(ModelError::Dimension("facet matrix does not match state dimension".into()));
    }
    let mut d = DVector::zeros(facets.nrows());
    for i in 0..facets.nrows() {
        let dir = facets.row(i).transpose();
        d[i] = model.disturbance_set().support(solver, &dir)?;
    }
    Ok(d)
}

/// Scheduler for models of the form `A(p) = A0 + p1 A1 + p2 A2` where the
/// physical parameter `v` lives in a positive interval, `p1 = v`, and
/// `p2 = 1/v`. The reachable `(p1, p2)` pairs lie on a hyperbola segment;
/// the hull tracked here is a tight trapezoid around it, intersected with
/// the previous hull on every restriction so the model only shrinks.
#[derive(Clone, Debug)]
pub struct LpvScheduler {
    a0: DMatrix<f64>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    b: DMatrix<f64>,
    initial_range: (f64, f64),
    range: (f64, f64),
    hull: Vec<[f64; 2]>,
}

impl LpvScheduler {
    pub fn new(
        a0: DMatrix<f64>,
        a1: DMatrix<f64>,
        a2: DMatrix<f64>,
        b: DMatrix<f64>,
        range: (f64, f64),
    ) -> Result<Self, ModelError> {
        let nx = a0.nrows();
        if a0.ncols() != nx
            || a1.nrows() != nx
            || a1.ncols() != nx
            || a2.nrows() != nx
            || a2.ncols() != nx
            || b.nrows() != nx
        {
            return Err(ModelError::Dimension("scheduler matrices must share the state dimension".into()));
        }
        let (lo, hi) = range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(ModelError::Invalid(format!(
                "parameter range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        let hull = trapezoid(lo, hi);
        Ok(Self { a0, a1, a2, b, initial_range: range, range, hull })
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn initial_range(&self) -> (f64, f64) {
        self.initial_range
    }

    /// Current parameter-hull vertices `(p1, p2)`.
    pub fn hull(&self) -> &[[f64; 2]] {
        &self.hull
    }

    /// Vertex `(A, B)` pairs induced by the current hull.
    pub fn vertex_pairs(&self) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
        self.hull
            .iter()
            .map(|p| (&self.a0 + &self.a1 * p[0] + &self.a2 * p[1], self.b.clone()))
            .collect()
    }

    /// Dynamics realized on the chord of the reciprocal curve over the
    /// current range. Both chord endpoints lie on the curve, which every
    /// hull along a nested restriction sequence contains, so the chord is
    /// always an admissible parameter pair.
    pub fn realize_on_chord(&self, p1: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (lo, hi) = self.range;
        let p = p1.clamp(lo, hi);
        let p2 = (lo + hi - p) / (lo * hi);
        (&self.a0 + &self.a1 * p + &self.a2 * p2, self.b.clone())
    }

    /// Shrinks the parameter range. The new hull is the trapezoid of the
    /// new range intersected with the current hull, so the vertex set never
    /// grows outward and constraints built from it remain valid.
    pub fn restrict(
        &self,
        new_range: (f64, f64),
        solver: &dyn QpSolver,
    ) -> Result<LpvScheduler, ModelError> {
        let (lo, hi) = new_range;
        let (cur_lo, cur_hi) = self.range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(ModelError::Invalid(format!(
                "parameter range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        if lo < cur_lo - 1e-12 || hi > cur_hi + 1e-12 {
            return Err(ModelError::RangeNotNested {
                new_lo: lo,
                new_hi: hi,
                cur_lo,
                cur_hi,
            });
        }
        let fresh = trapezoid(lo, hi);
        let hull = hull2d::intersect(&fresh, &self.hull, 1e-12, solver)?;
        if hull.is_empty() {
            return Err(ModelError::Invalid("restricted parameter hull is empty".into()));
        }
        Ok(LpvScheduler {
            a0: self.a0.clone(),
            a1: self.a1.clone(),
            a2: self.a2.clone(),
            b: self.b.clone(),
            initial_range: self.initial_range,
            range: new_range,
            hull,
        })
    }
}

/// Tight containing trapezoid of the hyperbola segment
/// `{(v, 1/v) : v in [lo, hi]}`: the two curve endpoints (the chord above
/// the curve) plus the tangent at the geometric midpoint intersected with
/// the vertical line `p1 = lo` and the horizontal line `p2 = 1/hi`.
pub fn trapezoid(lo: f64, hi: f64) -> Vec<[f64; 2]> {
    if hi - lo <= 1e-12 * lo.max(1.0) {
        return vec![[lo, 1.0 / lo]];
    }
    let s = (lo * hi).sqrt();
    let tangent = |p1: f64| 2.0 / s - p1 / (s * s);
    let p_lo = [lo, 1.0 / lo];
    let p_hi = [hi, 1.0 / hi];
    let t_lo = [lo, tangent(lo)];
    let t_hi = [(2.0 / s - 1.0 / hi) * s * s, 1.0 / hi];
    vec![p_lo, p_hi, t_lo, t_hi]
}
