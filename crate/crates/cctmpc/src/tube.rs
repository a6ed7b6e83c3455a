//! One-step robust transition constraints between tube cross sections.
//!
//! A transition `(y, u, y+)` is admissible when, for every model vertex
//! `(A_i, B_i)` and every template vertex map `V_j`, the disturbed image of
//! template vertex `j` under its assigned input `u_j` lands inside
//! `X(y+)`:
//!
//! ```text
//! F (A_i V_j y + B_i u_j) + d <= y+      (dynamics, p * v * m rows)
//! E y <= 0                               (configuration cone, q rows)
//! H_X V_j y <= h_X                       (state constraints, v rows of X)
//! H_U u_j <= h_U                         (input constraints, v rows of U)
//! ```
//!
//! with `d_i` the support of the disturbance set along facet `i`. Rowwise
//! support bounds make the dynamics rows exact for polytopic disturbances:
//! admissibility of the transition implies that every state in `X(y)`,
//! controlled by interpolation of the vertex inputs, robustly reaches
//! `X(y+)`.

use crate::geometry::{GeometryError, TemplateConfig};
use crate::model::{disturbance_bound, ModelError, UncertainModel};
use crate::qp::{QpError, QpSolver};
use crate::sparse::SparseMat;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TubeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] QpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowGroup {
    Dynamics,
    Cone,
    State,
    Input,
}

/// Residual report for one transition.
#[derive(Clone, Debug)]
pub struct TransitionCheck {
    pub ok: bool,
    /// Worst violation over all rows (negative when strictly feasible).
    pub worst: f64,
    /// Group and in-group row index of the worst row.
    pub group: RowGroup,
    pub row: usize,
}

/// Precomputed constraint pieces for the transition set.
///
/// The pieces are stored against the three argument blocks separately so
/// builders can place them at arbitrary column offsets and substitute
/// affine combinations for `y+` (needed by the terminal constraint).
#[derive(Clone, Debug)]
pub struct SBlock {
    /// `F A_i V_j`, indexed by `i * v + j`.
    dyn_y: Vec<DMatrix<f64>>,
    /// `F B_i`, indexed by `i`; acts on the j-th input slot.
    dyn_u: Vec<DMatrix<f64>>,
    /// Per-facet disturbance support.
    disturbance: DVector<f64>,
    /// Reduced configuration cone.
    cone: DMatrix<f64>,
    /// `H_X V_j` stacked over `j`.
    state_y: DMatrix<f64>,
    state_rhs: DVector<f64>,
    /// State-set rows per template vertex.
    state_rows_per_vertex: usize,
    /// Input-set rows `H_U` and offsets, applied to each input slot.
    input_u: DMatrix<f64>,
    input_rhs: DVector<f64>,
    m: usize,
    v: usize,
    nu: usize,
    p: usize,
}

impl SBlock {
    pub fn new(
        model: &UncertainModel,
        template: &TemplateConfig,
        solver: &dyn QpSolver,
    ) -> Result<Self, TubeError> {
        if template.state_dim() != model.state_dim() {
            return Err(TubeError::Dimension(
                "template and model state dimensions differ".into(),
            ));
        }
        let disturbance = disturbance_bound(model, template.facets(), solver)?;
        Self::with_disturbance(model, template, disturbance)
    }

    /// Variant with a precomputed disturbance bound (kept by
    /// [`SBlock::rebuild_dynamics`], which never changes it).
    pub fn with_disturbance(
        model: &UncertainModel,
        template: &TemplateConfig,
        disturbance: DVector<f64>,
    ) -> Result<Self, TubeError> {
        let m = template.num_facets();
        let v = template.num_vertices();
        let nu = model.input_dim();
        let p = model.num_vertices();
        if disturbance.len() != m {
            return Err(TubeError::Dimension("disturbance bound length must be m".into()));
        }

        let f = template.facets();
        let mut dyn_y = Vec::with_capacity(p * v);
        let mut dyn_u = Vec::with_capacity(p);
        for (a_i, b_i) in model.vertices() {
            for vj in template.vertex_maps() {
                dyn_y.push(f * a_i * vj);
            }
            dyn_u.push(f * b_i);
        }

        let hx = model.state_set();
        let rows_x = hx.num_rows();
        let mut state_y = DMatrix::zeros(v * rows_x, m);
        let mut state_rhs = DVector::zeros(v * rows_x);
        for (j, vj) in template.vertex_maps().iter().enumerate() {
            state_y
                .view_mut((j * rows_x, 0), (rows_x, m))
                .copy_from(&(hx.normals() * vj));
            state_rhs.rows_mut(j * rows_x, rows_x).copy_from(hx.offsets());
        }

        Ok(Self {
            dyn_y,
            dyn_u,
            disturbance,
            cone: template.cone().clone(),
            state_y,
            state_rhs,
            state_rows_per_vertex: rows_x,
            input_u: model.input_set().normals().clone(),
            input_rhs: model.input_set().offsets().clone(),
            m,
            v,
            nu,
            p,
        })
    }

    /// Rebuilds only the dynamics rows for new model vertices; cone, state,
    /// input, and disturbance pieces (none of which depend on the vertex
    /// matrices) are reused. Intended for LPV restrictions.
    pub fn rebuild_dynamics(
        &self,
        model: &UncertainModel,
        template: &TemplateConfig,
    ) -> Result<Self, TubeError> {
        Self::with_disturbance(model, template, self.disturbance.clone())
    }

    pub fn facet_count(&self) -> usize {
        self.m
    }

    pub fn vertex_count(&self) -> usize {
        self.v
    }

    pub fn input_dim(&self) -> usize {
        self.nu
    }

    pub fn model_vertices(&self) -> usize {
        self.p
    }

    pub fn cone_rows(&self) -> usize {
        self.cone.nrows()
    }

    pub fn disturbance(&self) -> &DVector<f64> {
        &self.disturbance
    }

    /// Width of the stacked input block `u` (all vertex inputs).
    pub fn input_width(&self) -> usize {
        self.v * self.nu
    }

    pub fn dynamics_rows(&self) -> usize {
        self.p * self.v * self.m
    }

    pub fn state_rows(&self) -> usize {
        self.v * self.state_rows_per_vertex
    }

    pub fn input_rows(&self) -> usize {
        self.v * self.input_rhs.len()
    }

    pub fn num_rows(&self) -> usize {
        self.dynamics_rows() + self.cone_rows() + self.state_rows() + self.input_rows()
    }

    /// Appends all transition rows to a sparse builder.
    ///
    /// `y` lives at columns `y_off..`, the stacked inputs at `u_off..`,
    /// and `y+` is the affine combination of the column blocks listed in
    /// `yplus` (offset and weight each); weights typically sum to one.
    /// Fills `upper[row0..row0 + num_rows()]`; all rows are one-sided.
    pub fn emit(
        &self,
        mat: &mut SparseMat,
        upper: &mut DVector<f64>,
        row0: usize,
        y_off: usize,
        u_off: usize,
        yplus: &[(usize, f64)],
    ) {
        let mut row = row0;
        for i in 0..self.p {
            for j in 0..self.v {
                let block = &self.dyn_y[i * self.v + j];
                mat.add_dense_block(row, y_off, block);
                mat.add_dense_block(row, u_off + j * self.nu, &self.dyn_u[i]);
                for &(off, w) in yplus {
                    mat.add_scaled_identity(row, off, self.m, -w);
                }
                for r in 0..self.m {
                    upper[row + r] = -self.disturbance[r];
                }
                row += self.m;
            }
        }
        mat.add_dense_block(row, y_off, &self.cone);
        for r in 0..self.cone_rows() {
            upper[row + r] = 0.0;
        }
        row += self.cone_rows();
        mat.add_dense_block(row, y_off, &self.state_y);
        for r in 0..self.state_y.nrows() {
            upper[row + r] = self.state_rhs[r];
        }
        row += self.state_y.nrows();
        for j in 0..self.v {
            mat.add_dense_block(row, u_off + j * self.nu, &self.input_u);
            for r in 0..self.input_rhs.len() {
                upper[row + r] = self.input_rhs[r];
            }
            row += self.input_rhs.len();
        }
        debug_assert_eq!(row - row0, self.num_rows());
    }

    /// Evaluates all rows at a concrete transition.
    pub fn check(
        &self,
        y: &DVector<f64>,
        u: &DVector<f64>,
        yplus: &DVector<f64>,
        tol: f64,
    ) -> TransitionCheck {
        assert_eq!(y.len(), self.m, "y length");
        assert_eq!(u.len(), self.input_width(), "u length");
        assert_eq!(yplus.len(), self.m, "yplus length");

        let mut worst = f64::NEG_INFINITY;
        let mut group = RowGroup::Dynamics;
        let mut row = 0usize;

        for i in 0..self.p {
            for j in 0..self.v {
                let uj = u.rows(j * self.nu, self.nu);
                let lhs = &self.dyn_y[i * self.v + j] * y + &self.dyn_u[i] * uj
                    + &self.disturbance
                    - yplus;
                for (r, &val) in lhs.iter().enumerate() {
                    if val > worst {
                        worst = val;
                        group = RowGroup::Dynamics;
                        row = (i * self.v + j) * self.m + r;
                    }
                }
            }
        }
        let ey = &self.cone * y;
        for (r, &val) in ey.iter().enumerate() {
            if val > worst {
                worst = val;
                group = RowGroup::Cone;
                row = r;
            }
        }
        let sx = &self.state_y * y - &self.state_rhs;
        for (r, &val) in sx.iter().enumerate() {
            if val > worst {
                worst = val;
                group = RowGroup::State;
                row = r;
            }
        }
        for j in 0..self.v {
            let uj = u.rows(j * self.nu, self.nu);
            let su = &self.input_u * uj - &self.input_rhs;
            for (r, &val) in su.iter().enumerate() {
                if val > worst {
                    worst = val;
                    group = RowGroup::Input;
                    row = j * self.input_rhs.len() + r;
                }
            }
        }
        TransitionCheck { ok: worst <= tol, worst, group, row }
    }

    /// All rows with `y` and `y+` fixed, as a dense system over the
    /// stacked inputs alone. Rows without input dependence stay in the
    /// system with zero coefficients, so an inadmissible shape makes the
    /// system infeasible rather than silently passing.
    pub fn rows_for_fixed(
        &self,
        y: &DVector<f64>,
        yplus: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        assert_eq!(y.len(), self.m, "y length");
        assert_eq!(yplus.len(), self.m, "yplus length");
        let width = self.input_width();
        let mut a = DMatrix::zeros(self.num_rows(), width);
        let mut b = DVector::zeros(self.num_rows());
        let mut row = 0usize;
        for i in 0..self.p {
            for j in 0..self.v {
                a.view_mut((row, j * self.nu), (self.m, self.nu)).copy_from(&self.dyn_u[i]);
                let rhs = yplus - &self.dyn_y[i * self.v + j] * y - &self.disturbance;
                b.rows_mut(row, self.m).copy_from(&rhs);
                row += self.m;
            }
        }
        let ey = &self.cone * y;
        for r in 0..self.cone_rows() {
            b[row + r] = -ey[r];
        }
        row += self.cone_rows();
        let sx = &self.state_y * y;
        for r in 0..self.state_y.nrows() {
            b[row + r] = self.state_rhs[r] - sx[r];
        }
        row += self.state_y.nrows();
        for j in 0..self.v {
            a.view_mut((row, j * self.nu), (self.input_rhs.len(), self.nu))
                .copy_from(&self.input_u);
            b.rows_mut(row, self.input_rhs.len()).copy_from(&self.input_rhs);
            row += self.input_rhs.len();
        }
        debug_assert_eq!(row, self.num_rows());
        (a, b)
    }
}
