//! Polytopes, facet templates, vertex maps, and configuration cones.
//!
//! The controller works with parameterized sets `X(y) = {x : F x <= y}`
//! where the facet matrix `F` is fixed and only the offsets `y` move. For
//! parameters inside the configuration cone the face structure of `X(y)`
//! is constant, so vertex `j` is the linear image `V_j y` of the parameter
//! and set operations needed by the controller stay linear in `y`.

use crate::lp::{self, LpOutcome};
use crate::qp::{QpError, QpSolver, QuadraticProgram};
use crate::sparse::SparseMat;
use crate::tol;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Hard cap for brute-force vertex enumeration.
pub const MAX_ENUM_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("set is empty")]
    Empty,
    #[error("set is unbounded")]
    Unbounded,
    #[error("vertex enumeration supports dimension <= {max}, got {got}")]
    DimensionTooLarge { max: usize, got: usize },
    #[error("vertex {index} has {active} active facets in dimension {dim}; template is not simple")]
    DegenerateVertex { index: usize, active: usize, dim: usize },
    #[error("template invariant violated: {0}")]
    BadTemplate(String),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Polyhedron in halfspace form `{x : A x <= b}`.
#[derive(Clone, Debug)]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, GeometryError> {
        if normals.nrows() != offsets.len() {
            return Err(GeometryError::Dimension(format!(
                "{} normal rows vs {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if normals.iter().any(|v| !v.is_finite()) || offsets.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite polytope data".into()));
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box; degenerate axes (`lower == upper`) are allowed.
    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self, GeometryError> {
        let n = lower.len();
        if upper.len() != n {
            return Err(GeometryError::Dimension("box bound lengths differ".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(GeometryError::Invalid("box lower bound exceeds upper".into()));
        }
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = upper[i];
            a[(n + i, i)] = -1.0;
            b[n + i] = -lower[i];
        }
        Self::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let ax = &self.normals * x;
        (0..self.num_rows()).all(|i| ax[i] <= self.offsets[i] + tol)
    }

    /// Stacks the rows of both polytopes.
    pub fn intersection(&self, other: &HPolytope) -> Result<HPolytope, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::Dimension("intersection of different dimensions".into()));
        }
        let mut a = DMatrix::zeros(self.num_rows() + other.num_rows(), self.dim());
        a.view_mut((0, 0), (self.num_rows(), self.dim())).copy_from(&self.normals);
        a.view_mut((self.num_rows(), 0), (other.num_rows(), self.dim()))
            .copy_from(&other.normals);
        let mut b = DVector::zeros(a.nrows());
        b.rows_mut(0, self.num_rows()).copy_from(&self.offsets);
        b.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.offsets);
        HPolytope::new(a, b)
    }

    /// Shrinks each offset by the given amount (rowwise erosion).
    pub fn erode(&self, amounts: &DVector<f64>) -> Result<HPolytope, GeometryError> {
        if amounts.len() != self.num_rows() {
            return Err(GeometryError::Dimension("erosion amount per row required".into()));
        }
        HPolytope::new(self.normals.clone(), &self.offsets - amounts)
    }

    pub fn is_empty(&self, solver: &dyn QpSolver) -> Result<bool, GeometryError> {
        Ok(!lp::is_feasible(solver, &self.normals, &self.offsets)?)
    }

    /// Support value `max_{x in P} d' x`.
    pub fn support(&self, solver: &dyn QpSolver, dir: &DVector<f64>) -> Result<f64, GeometryError> {
        match lp::maximize(solver, dir, &self.normals, &self.offsets)? {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Infeasible => Err(GeometryError::Empty),
            LpOutcome::Unbounded => Err(GeometryError::Unbounded),
        }
    }

    /// Bounded iff the support is finite along every signed axis direction.
    pub fn is_bounded(&self, solver: &dyn QpSolver) -> Result<bool, GeometryError> {
        for i in 0..self.dim() {
            for sign in [1.0, -1.0] {
                let mut d = DVector::zeros(self.dim());
                d[i] = sign;
                match self.support(solver, &d) {
                    Ok(_) => {}
                    Err(GeometryError::Unbounded) => return Ok(false),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(true)
    }

    /// All vertices, brute force over facet subsets. Requires a nonempty,
    /// bounded polytope of dimension at most [`MAX_ENUM_DIM`]. Degenerate
    /// vertices (more than `dim` active facets) are returned once.
    pub fn vertices(&self, solver: &dyn QpSolver) -> Result<Vec<DVector<f64>>, GeometryError> {
        Ok(self.vertices_with_active(solver)?.into_iter().map(|(v, _)| v).collect())
    }

    /// Vertices together with the indices of all facets active there.
    pub fn vertices_with_active(
        &self,
        solver: &dyn QpSolver,
    ) -> Result<Vec<(DVector<f64>, Vec<usize>)>, GeometryError> {
        let n = self.dim();
        let k = self.num_rows();
        if n > MAX_ENUM_DIM {
            return Err(GeometryError::DimensionTooLarge { max: MAX_ENUM_DIM, got: n });
        }
        if self.is_empty(solver)? {
            return Err(GeometryError::Empty);
        }
        if !self.is_bounded(solver)? {
            return Err(GeometryError::Unbounded);
        }

        let mut out: Vec<(DVector<f64>, Vec<usize>)> = Vec::new();
        let mut subset = vec![0usize; n];
        for_each_combination(k, n, &mut subset, 0, 0, &mut |idx: &[usize]| {
            let mut m = DMatrix::zeros(n, n);
            let mut b = DVector::zeros(n);
            for (r, &i) in idx.iter().enumerate() {
                m.row_mut(r).copy_from(&self.normals.row(i));
                b[r] = self.offsets[i];
            }
            let Some(x) = m.clone().lu().solve(&b) else { return };
            if !x.iter().all(|v| v.is_finite()) {
                return;
            }
            // Guard against ill-conditioned solves sneaking in as "vertices".
            let residual = (&m * &x - &b).amax();
            if residual > tol::VERTEX * 10.0 {
                return;
            }
            if !self.contains(&x, tol::VERTEX * (1.0 + x.amax())) {
                return;
            }
            let dedup_tol = tol::VERTEX * 10.0 * (1.0 + x.amax());
            if out.iter().any(|(v, _)| (v - &x).amax() <= dedup_tol) {
                return;
            }
            let ax = &self.normals * &x;
            let active: Vec<usize> = (0..k)
                .filter(|&i| (ax[i] - self.offsets[i]).abs() <= tol::VERTEX * (1.0 + self.offsets[i].abs()))
                .collect();
            out.push((x, active));
        });
        // Deterministic order: lexicographic by coordinates.
        out.sort_by(|(a, _), (b, _)| {
            for i in 0..n {
                match a[i].partial_cmp(&b[i]).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        });
        Ok(out)
    }

    /// Drops rows implied by the others (and exact duplicates). Keeps the
    /// original row order of the survivors. The polytope must be nonempty.
    pub fn reduce(&self, solver: &dyn QpSolver) -> Result<HPolytope, GeometryError> {
        if self.is_empty(solver)? {
            return Err(GeometryError::Empty);
        }
        let mut keep: Vec<usize> = Vec::new();
        // Pass 1: drop zero rows and duplicate (normalized) rows.
        for i in 0..self.num_rows() {
            let row = self.normals.row(i);
            let norm = row.amax();
            if norm <= 1e-10 {
                continue; // 0' x <= b with b >= 0 (nonempty checked): trivial.
            }
            let dup = keep.iter().any(|&j| {
                let nj = self.normals.row(j).amax();
                let scaled_i = row / norm;
                let scaled_j = self.normals.row(j) / nj;
                (scaled_i - scaled_j).amax() <= 1e-12
                    && self.offsets[j] / nj <= self.offsets[i] / norm + 1e-12
            });
            if !dup {
                keep.push(i);
            }
        }
        // Pass 2: per-row LP redundancy against the current survivor set.
        let mut idx = 0;
        while idx < keep.len() {
            let a = select_rows(&self.normals, &keep);
            let b = DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.offsets[i]));
            if lp::row_redundant(solver, &a, &b, idx, tol::VERTEX)? {
                keep.remove(idx);
            } else {
                idx += 1;
            }
        }
        HPolytope::new(
            select_rows(&self.normals, &keep),
            DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.offsets[i])),
        )
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&m.row(i));
    }
    out
}

fn for_each_combination(
    k: usize,
    n: usize,
    subset: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == n {
        f(subset);
        return;
    }
    for i in start..k {
        subset[depth] = i;
        for_each_combination(k, n, subset, depth + 1, i + 1, f);
    }
}

/// Line segment between two points as a (degenerate) polytope: equality
/// rows pin the orthogonal complement of the direction, two cap rows bound
/// the position along it.
pub fn segment(p0: &DVector<f64>, p1: &DVector<f64>) -> Result<HPolytope, GeometryError> {
    let n = p0.len();
    if p1.len() != n {
        return Err(GeometryError::Dimension("segment endpoint dimensions differ".into()));
    }
    let u = p1 - p0;
    let norm = u.norm();
    if norm <= 1e-14 {
        return HPolytope::from_box(p0, p0);
    }
    let dir = &u / norm;
    // Orthonormal complement from the eigenvectors of the projector
    // I - dir dir' with eigenvalue 1.
    let projector = DMatrix::identity(n, n) - &dir * dir.transpose();
    let eig = nalgebra::SymmetricEigen::new(projector);
    let mut a = DMatrix::zeros(2 * n, n);
    let mut b = DVector::zeros(2 * n);
    let mut row = 0;
    for k in 0..n {
        if eig.eigenvalues[k] > 0.5 {
            let q = eig.eigenvectors.column(k);
            let off = q.dot(p0);
            for c in 0..n {
                a[(row, c)] = q[c];
                a[(row + 1, c)] = -q[c];
            }
            b[row] = off;
            b[row + 1] = -off;
            row += 2;
        }
    }
    for c in 0..n {
        a[(row, c)] = dir[c];
        a[(row + 1, c)] = -dir[c];
    }
    b[row] = dir.dot(p1);
    b[row + 1] = -dir.dot(p0);
    row += 2;
    debug_assert_eq!(row, 2 * n, "projector rank must be n - 1");
    HPolytope::new(a, b)
}

/// Euclidean distance from `point` to `set` (zero if inside).
pub fn point_distance(
    solver: &dyn QpSolver,
    set: &HPolytope,
    point: &DVector<f64>,
) -> Result<f64, GeometryError> {
    let n = set.dim();
    if point.len() != n {
        return Err(GeometryError::Dimension("point/set dimension mismatch".into()));
    }
    // min 0.5 ||x - p||^2  =>  H = I, g = -p; add 0.5 p'p afterwards.
    let mut h = SparseMat::zeros(n, n);
    h.add_scaled_identity(0, 0, n, 1.0);
    let qp = QuadraticProgram::new(
        h,
        -point.clone(),
        SparseMat::from_dense(set.normals()),
        DVector::from_element(set.num_rows(), f64::NEG_INFINITY),
        set.offsets().clone(),
    )?;
    let res = solver.solve(&qp, None);
    let sol = res.optimal()?;
    let sq = (2.0 * (sol.objective + 0.5 * point.dot(point))).max(0.0);
    Ok(sq.sqrt())
}

/// Hausdorff distance between two nonempty bounded polytopes.
pub fn hausdorff_distance(
    solver: &dyn QpSolver,
    p: &HPolytope,
    q: &HPolytope,
) -> Result<f64, GeometryError> {
    let mut worst: f64 = 0.0;
    for v in p.vertices(solver)? {
        worst = worst.max(point_distance(solver, q, &v)?);
    }
    for v in q.vertices(solver)? {
        worst = worst.max(point_distance(solver, p, &v)?);
    }
    Ok(worst)
}

/// Whether `inner` is contained in `outer` within `tol`, by comparing the
/// support of `inner` against each facet of `outer`.
pub fn contains_set(
    solver: &dyn QpSolver,
    outer: &HPolytope,
    inner: &HPolytope,
    tol: f64,
) -> Result<bool, GeometryError> {
    for i in 0..outer.num_rows() {
        let d = outer.normals().row(i).transpose();
        let s = inner.support(solver, &d)?;
        if s > outer.offsets()[i] + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Facet template with per-vertex linear maps and the configuration cone.
///
/// Invariants established at construction: every vertex of the reference
/// polytope `X(y_ref)` is simple, `vertex_maps[j] * y` reproduces vertex
/// `j` of `X(y)` for every `y` in the cone, and `cone * y <= 0` holds at
/// `y_ref`.
#[derive(Clone, Debug)]
pub struct TemplateConfig {
    f: DMatrix<f64>,
    y_ref: DVector<f64>,
    vertex_maps: Vec<DMatrix<f64>>,
    mean_vertex_map: DMatrix<f64>,
    cone: DMatrix<f64>,
    raw_cone_rows: usize,
}

impl TemplateConfig {
    /// Derives vertex maps and the configuration cone from the polytope
    /// `{x : F x <= y_ref}`, which must be nonempty, bounded, and simple.
    pub fn derive(
        f: DMatrix<f64>,
        y_ref: DVector<f64>,
        solver: &dyn QpSolver,
    ) -> Result<Self, GeometryError> {
        let m = f.nrows();
        let nx = f.ncols();
        if y_ref.len() != m {
            return Err(GeometryError::Dimension("y_ref length must match facet count".into()));
        }
        let reference = HPolytope::new(f.clone(), y_ref.clone())?;
        let verts = reference.vertices_with_active(solver)?;
        if verts.is_empty() {
            return Err(GeometryError::Empty);
        }
        let mut vertex_maps = Vec::with_capacity(verts.len());
        for (index, (_, active)) in verts.iter().enumerate() {
            if active.len() != nx {
                return Err(GeometryError::DegenerateVertex {
                    index,
                    active: active.len(),
                    dim: nx,
                });
            }
            let fa = select_rows(&f, active);
            let inv = fa
                .lu()
                .try_inverse()
                .ok_or_else(|| GeometryError::BadTemplate(format!(
                    "active facets at vertex {index} are linearly dependent"
                )))?;
            // V_j = inv * row-selector: nonzero only in the active columns.
            let mut vj = DMatrix::zeros(nx, m);
            for (r, &i) in active.iter().enumerate() {
                for c in 0..nx {
                    vj[(c, i)] = inv[(c, r)];
                }
            }
            vertex_maps.push(vj);
        }

        // Raw cone rows: F V_j y <= y for every j, i.e. (F V_j - I) y <= 0.
        let v = vertex_maps.len();
        let mut raw = DMatrix::zeros(v * m, m);
        for (j, vj) in vertex_maps.iter().enumerate() {
            let block = &f * vj - DMatrix::identity(m, m);
            raw.view_mut((j * m, 0), (m, m)).copy_from(&block);
        }
        let raw_cone_rows = v * m;
        let cone_poly = HPolytope::new(raw, DVector::zeros(v * m))?.reduce(solver)?;
        let cone = cone_poly.normals().clone();

        let mut mean_vertex_map = DMatrix::zeros(nx, m);
        for vj in &vertex_maps {
            mean_vertex_map += vj;
        }
        mean_vertex_map /= v as f64;

        let tpl = Self { f, y_ref, vertex_maps, mean_vertex_map, cone, raw_cone_rows };
        tpl.check_reference(&verts)?;
        Ok(tpl)
    }

    fn check_reference(
        &self,
        verts: &[(DVector<f64>, Vec<usize>)],
    ) -> Result<(), GeometryError> {
        if !self.in_cone(&self.y_ref, tol::CONE) {
            return Err(GeometryError::BadTemplate(
                "reference parameter violates its own configuration cone".into(),
            ));
        }
        for (j, (x, _)) in verts.iter().enumerate() {
            let rebuilt = &self.vertex_maps[j] * &self.y_ref;
            if (rebuilt - x).amax() > 1e-8 * (1.0 + x.amax()) {
                return Err(GeometryError::BadTemplate(format!(
                    "vertex map {j} does not reproduce its vertex"
                )));
            }
        }
        Ok(())
    }

    pub fn facets(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn reference_parameter(&self) -> &DVector<f64> {
        &self.y_ref
    }

    /// Facet count `m`.
    pub fn num_facets(&self) -> usize {
        self.f.nrows()
    }

    /// Vertex count `v`.
    pub fn num_vertices(&self) -> usize {
        self.vertex_maps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn vertex_maps(&self) -> &[DMatrix<f64>] {
        &self.vertex_maps
    }

    pub fn mean_vertex_map(&self) -> &DMatrix<f64> {
        &self.mean_vertex_map
    }

    /// Reduced configuration cone `E` (rows of `E y <= 0`).
    pub fn cone(&self) -> &DMatrix<f64> {
        &self.cone
    }

    /// Number of cone rows before redundancy elimination (`v * m`).
    pub fn raw_cone_rows(&self) -> usize {
        self.raw_cone_rows
    }

    pub fn in_cone(&self, y: &DVector<f64>, tol: f64) -> bool {
        let ey = &self.cone * y;
        ey.iter().all(|&v| v <= tol)
    }

    /// Vertex positions of `X(y)`.
    pub fn vertex_points(&self, y: &DVector<f64>) -> Vec<DVector<f64>> {
        self.vertex_maps.iter().map(|vj| vj * y).collect()
    }

    pub fn polytope(&self, y: &DVector<f64>) -> Result<HPolytope, GeometryError> {
        HPolytope::new(self.f.clone(), y.clone())
    }
}

/// A template polytope instance `X(y)` with its parameter checked against
/// the configuration cone.
#[derive(Clone, Debug)]
pub struct ParamPolytope<'a> {
    template: &'a TemplateConfig,
    y: DVector<f64>,
}

impl<'a> ParamPolytope<'a> {
    pub fn new(template: &'a TemplateConfig, y: DVector<f64>) -> Result<Self, GeometryError> {
        if y.len() != template.num_facets() {
            return Err(GeometryError::Dimension("parameter length must match facets".into()));
        }
        if !template.in_cone(&y, tol::CONE) {
            return Err(GeometryError::Invalid(
                "parameter outside the configuration cone".into(),
            ));
        }
        Ok(Self { template, y })
    }

    pub fn parameter(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn template(&self) -> &TemplateConfig {
        self.template
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let fx = self.template.facets() * x;
        (0..self.y.len()).all(|i| fx[i] <= self.y[i] + tol)
    }

    pub fn vertex_points(&self) -> Vec<DVector<f64>> {
        self.template.vertex_points(&self.y)
    }

    pub fn to_polytope(&self) -> HPolytope {
        HPolytope { normals: self.template.facets().clone(), offsets: self.y.clone() }
    }
}

/// One Fourier-Motzkin step: eliminates column `col` from `A z <= b`.
///
/// Rows are split by the sign of their `col` coefficient; each
/// positive/negative pair combines into one bound on the remaining
/// variables, zero rows pass through. New rows are normalized to unit
/// infinity norm. The result can be numerically redundant; callers should
/// reduce it before the next elimination.
pub fn eliminate_variable(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    col: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), GeometryError> {
    let n = a.ncols();
    if col >= n {
        return Err(GeometryError::Dimension("elimination column out of range".into()));
    }
    let keep: Vec<usize> = (0..n).filter(|&c| c != col).collect();
    let mut zero_rows: Vec<usize> = Vec::new();
    let mut pos_rows: Vec<usize> = Vec::new();
    let mut neg_rows: Vec<usize> = Vec::new();
    for i in 0..a.nrows() {
        let v = a[(i, col)];
        if v.abs() <= 1e-12 {
            zero_rows.push(i);
        } else if v > 0.0 {
            pos_rows.push(i);
        } else {
            neg_rows.push(i);
        }
    }
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut push_row = |coeffs: DVector<f64>, off: f64| {
        let scale = coeffs.amax().max(off.abs());
        if scale <= 1e-13 {
            return; // 0 <= 0: trivial.
        }
        let c = &coeffs / scale;
        let o = off / scale;
        // Drop exact duplicates produced by parallel combinations.
        let dup = rows
            .iter()
            .zip(rhs.iter())
            .any(|(rc, &ro)| (rc - &c).amax() <= 1e-12 && (ro - o).abs() <= 1e-12);
        if !dup {
            rows.push(c);
            rhs.push(o);
        }
    };
    for &i in &zero_rows {
        let coeffs = DVector::from_iterator(keep.len(), keep.iter().map(|&c| a[(i, c)]));
        push_row(coeffs, b[i]);
    }
    for &p in &pos_rows {
        for &q in &neg_rows {
            let ap = a[(p, col)];
            let aq = a[(q, col)];
            // a_p > 0 gives an upper bound on z_col, a_q < 0 a lower one;
            // their compatibility is (a_p r_q - a_q r_p) z' <= a_p b_q - a_q b_p.
            let coeffs = DVector::from_iterator(
                keep.len(),
                keep.iter().map(|&c| ap * a[(q, c)] - aq * a[(p, c)]),
            );
            push_row(coeffs, ap * b[q] - aq * b[p]);
        }
    }
    if rows.is_empty() {
        // Unconstrained projection: empty row set over the kept columns.
        return Ok((DMatrix::zeros(0, keep.len()), DVector::zeros(0)));
    }
    let mut out_a = DMatrix::zeros(rows.len(), keep.len());
    let mut out_b = DVector::zeros(rows.len());
    for (r, (coeffs, off)) in rows.iter().zip(rhs.iter()).enumerate() {
        out_a.row_mut(r).copy_from(&coeffs.transpose());
        out_b[r] = *off;
    }
    Ok((out_a, out_b))
}

/// Projects `{(x, u) : A [x; u] <= b}` onto its first `dim_keep`
/// coordinates by eliminating trailing columns one at a time, pruning
/// redundant rows between steps.
pub fn project_to_prefix(
    solver: &dyn QpSolver,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    dim_keep: usize,
) -> Result<HPolytope, GeometryError> {
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    while cur_a.ncols() > dim_keep {
        let last = cur_a.ncols() - 1;
        let (na, nb) = eliminate_variable(&cur_a, &cur_b, last)?;
        let reduced = HPolytope::new(na, nb)?.reduce(solver)?;
        cur_a = reduced.normals().clone();
        cur_b = reduced.offsets().clone();
    }
    HPolytope::new(cur_a, cur_b)
}

/// Planar convex-hull utilities used by the parameter scheduler.
pub mod hull2d {
    use super::{GeometryError, HPolytope};
    use nalgebra::{DMatrix, DVector};

    fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    }

    /// Convex hull in counterclockwise order (monotone chain). Collinear
    /// inputs collapse to their extreme points; duplicates are merged.
    pub fn convex_hull(points: &[[f64; 2]], tol: f64) -> Vec<[f64; 2]> {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for &p in points {
            if !pts.iter().any(|q| (q[0] - p[0]).abs() <= tol && (q[1] - p[1]).abs() <= tol) {
                pts.push(p);
            }
        }
        if pts.len() <= 2 {
            return pts;
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut hull: Vec<[f64; 2]> = Vec::new();
        for &p in &pts {
            while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= tol {
                hull.pop();
            }
            hull.push(p);
        }
        let lower_len = hull.len() + 1;
        for &p in pts.iter().rev().skip(1) {
            while hull.len() >= lower_len
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= tol
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        if hull.len() < 3 {
            // All points collinear: keep the two extremes.
            return vec![*pts.first().unwrap(), *pts.last().unwrap()];
        }
        hull
    }

    /// Halfspace representation of the hull of `points`. Degenerate hulls
    /// (segments, single points) get explicit bounding rows.
    pub fn to_hrep(points: &[[f64; 2]], tol: f64) -> Result<HPolytope, GeometryError> {
        let hull = convex_hull(points, tol);
        match hull.len() {
            0 => Err(GeometryError::Empty),
            1 => {
                let p = hull[0];
                let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
                let b = DVector::from_column_slice(&[p[0], -p[0], p[1], -p[1]]);
                HPolytope::new(a, b)
            }
            2 => {
                let (p, q) = (hull[0], hull[1]);
                let d = [q[0] - p[0], q[1] - p[1]];
                let n = [-d[1], d[0]];
                let mut a = DMatrix::zeros(4, 2);
                let mut b = DVector::zeros(4);
                // Two rows pin the segment's line, two cap its extent.
                a[(0, 0)] = n[0];
                a[(0, 1)] = n[1];
                b[0] = n[0] * p[0] + n[1] * p[1];
                a[(1, 0)] = -n[0];
                a[(1, 1)] = -n[1];
                b[1] = -b[0];
                a[(2, 0)] = d[0];
                a[(2, 1)] = d[1];
                b[2] = d[0] * q[0] + d[1] * q[1];
                a[(3, 0)] = -d[0];
                a[(3, 1)] = -d[1];
                b[3] = -(d[0] * p[0] + d[1] * p[1]);
                HPolytope::new(a, b)
            }
            k => {
                let mut a = DMatrix::zeros(k, 2);
                let mut b = DVector::zeros(k);
                for i in 0..k {
                    let p = hull[i];
                    let q = hull[(i + 1) % k];
                    // Outward normal of a CCW edge.
                    let n = [q[1] - p[1], p[0] - q[0]];
                    a[(i, 0)] = n[0];
                    a[(i, 1)] = n[1];
                    b[i] = n[0] * p[0] + n[1] * p[1];
                }
                HPolytope::new(a, b)
            }
        }
    }

    /// Vertices of the intersection of two hulls given as point sets.
    pub fn intersect(
        lhs: &[[f64; 2]],
        rhs: &[[f64; 2]],
        tol: f64,
        solver: &dyn crate::qp::QpSolver,
    ) -> Result<Vec<[f64; 2]>, GeometryError> {
        let hp = to_hrep(lhs, tol)?;
        let hq = to_hrep(rhs, tol)?;
        let both = hp.intersection(&hq)?;
        let verts = both.vertices(solver)?;
        Ok(convex_hull(
            &verts.iter().map(|v| [v[0], v[1]]).collect::<Vec<_>>(),
            tol,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::ClarabelSolver;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn solver() -> ClarabelSolver {
        ClarabelSolver::default()
    }

    fn square() -> HPolytope {
        HPolytope::from_box(&dvector![-1.0, -1.0], &dvector![1.0, 1.0]).unwrap()
    }

    #[test]
    fn box_vertices_enumerated() {
        let p = square();
        let verts = p.vertices(&solver()).unwrap();
        assert_eq!(verts.len(), 4);
        assert!(verts.iter().all(|v| v.amax() <= 1.0 + 1e-9));
        let corner_count = verts
            .iter()
            .filter(|v| (v[0].abs() - 1.0).abs() < 1e-9 && (v[1].abs() - 1.0).abs() < 1e-9)
            .count();
        assert_eq!(corner_count, 4);
    }

    #[test]
    fn segment_vertices_enumerated() {
        // Degenerate box: the segment {0} x [-0.5, 0.5].
        let p = HPolytope::from_box(&dvector![0.0, -0.5], &dvector![0.0, 0.5]).unwrap();
        let verts = p.vertices(&solver()).unwrap();
        assert_eq!(verts.len(), 2);
        assert_abs_diff_eq!(verts[0][1], -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(verts[1][1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn unbounded_and_empty_detected() {
        let half = HPolytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            dvector![1.0],
        )
        .unwrap();
        assert!(matches!(half.vertices(&solver()), Err(GeometryError::Unbounded)));

        let empty = HPolytope::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            dvector![-1.0, -1.0],
        )
        .unwrap();
        assert!(matches!(empty.vertices(&solver()), Err(GeometryError::Empty)));
    }

    #[test]
    fn support_and_containment() {
        let p = square();
        let s = p.support(&solver(), &dvector![3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(s, 7.0, epsilon = 1e-6);
        assert!(contains_set(&solver(), &p, &square(), 1e-9).unwrap());
        let small = HPolytope::from_box(&dvector![-0.5, -0.5], &dvector![0.5, 0.5]).unwrap();
        assert!(contains_set(&solver(), &p, &small, 1e-9).unwrap());
        assert!(!contains_set(&solver(), &small, &p, 1e-9).unwrap());
    }

    #[test]
    fn hausdorff_of_scaled_boxes() {
        let p = square();
        let small = HPolytope::from_box(&dvector![-0.5, -0.5], &dvector![0.5, 0.5]).unwrap();
        let d = hausdorff_distance(&solver(), &p, &small).unwrap();
        // Corner (1,1) to the small box: distance sqrt(0.5).
        assert_abs_diff_eq!(d, 0.5f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn reduce_drops_redundant_rows() {
        let mut a = DMatrix::zeros(5, 2);
        a.view_mut((0, 0), (4, 2)).copy_from(square().normals());
        a[(4, 0)] = 1.0; // x <= 2 duplicate direction, looser.
        let b = DVector::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 2.0]);
        let p = HPolytope::new(a, b).unwrap().reduce(&solver()).unwrap();
        assert_eq!(p.num_rows(), 4);
    }

    fn diamond_template() -> (DMatrix<f64>, DVector<f64>) {
        // Rotated square: simple polytope with m = 4, v = 4 in 2D.
        let a = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        );
        (a, DVector::from_element(4, 1.0))
    }

    #[test]
    fn template_reproduces_vertices_across_cone() {
        let (f, y_ref) = diamond_template();
        let tpl = TemplateConfig::derive(f, y_ref, &solver()).unwrap();
        assert_eq!(tpl.num_vertices(), 4);
        // Perturbed parameter still inside the cone.
        let y = dvector![1.3, 0.9, 1.1, 1.05];
        assert!(tpl.in_cone(&y, 1e-9));
        let pts = tpl.vertex_points(&y);
        let poly = tpl.polytope(&y).unwrap();
        let enumerated = poly.vertices(&solver()).unwrap();
        assert_eq!(pts.len(), enumerated.len());
        for e in &enumerated {
            assert!(
                pts.iter().any(|p| (p - e).amax() < 1e-7),
                "enumerated vertex {e} not produced by any vertex map"
            );
        }
    }

    #[test]
    fn degenerate_template_rejected() {
        // Square with an extra diagonal facet through the corner (1, 1):
        // three facets active at one vertex in 2D.
        let f = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0],
        );
        let y = dvector![1.0, 1.0, 1.0, 1.0, 2.0];
        let err = TemplateConfig::derive(f, y, &solver()).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateVertex { .. }));
    }

    #[test]
    fn param_polytope_checks_cone() {
        let (f, y_ref) = diamond_template();
        let tpl = TemplateConfig::derive(f, y_ref, &solver()).unwrap();
        // A parameter far outside the cone: offsets that make the set empty
        // flip the face structure.
        let bad = dvector![-1.0, -1.0, -1.0, -1.0];
        assert!(ParamPolytope::new(&tpl, bad).is_err());
        let good = ParamPolytope::new(&tpl, dvector![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(good.contains(&dvector![0.0, 0.0], 0.0));
        assert!(!good.contains(&dvector![2.0, 0.0], 1e-9));
    }

    #[test]
    fn projection_eliminates_auxiliary_variable() {
        // {(x, u) : |x + u| <= 1, |u| <= 0.5} projected to x is [-1.5, 1.5].
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, -1.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_column_slice(&[1.0, 1.0, 0.5, 0.5]);
        let p = project_to_prefix(&solver(), &a, &b, 1).unwrap();
        let s = solver();
        assert_abs_diff_eq!(p.support(&s, &dvector![1.0]).unwrap(), 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(p.support(&s, &dvector![-1.0]).unwrap(), 1.5, epsilon = 1e-7);
    }

    #[test]
    fn segment_polytope_is_degenerate_but_valid() {
        let seg = segment(&dvector![1.0, 1.0, 0.0], &dvector![1.0, 3.0, 0.0]).unwrap();
        assert!(seg.contains(&dvector![1.0, 2.0, 0.0], 1e-9));
        assert!(!seg.contains(&dvector![1.0, 2.0, 0.1], 1e-9));
        assert!(!seg.contains(&dvector![1.0, 3.5, 0.0], 1e-9));
    }

    #[test]
    fn hull2d_intersection_of_overlapping_squares() {
        let a = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        let b = [[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]];
        let got = hull2d::intersect(&a, &b, 1e-9, &solver()).unwrap();
        assert_eq!(got.len(), 4);
        for p in &got {
            assert!(p[0] >= 1.0 - 1e-7 && p[0] <= 2.0 + 1e-7);
            assert!(p[1] >= 1.0 - 1e-7 && p[1] <= 2.0 + 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn support_is_sublinear(seed in 0u64..5_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let p = square();
            let s = solver();
            let d1 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0f64));
            let d2 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0f64));
            let h1 = p.support(&s, &d1).unwrap();
            let h2 = p.support(&s, &d2).unwrap();
            let hsum = p.support(&s, &(&d1 + &d2)).unwrap();
            prop_assert!(hsum <= h1 + h2 + 1e-6);
            // Positive homogeneity.
            let lambda = rng.gen_range(0.1..3.0);
            let hl = p.support(&s, &(&d1 * lambda)).unwrap();
            prop_assert!((hl - lambda * h1).abs() <= 1e-6 * (1.0 + h1.abs()));
        }
    }
}
