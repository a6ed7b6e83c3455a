//! Control law by vertex interpolation.
//!
//! The controller optimizes one input per cross-section vertex. At a
//! concrete state the applied input is the convex combination of those
//! vertex inputs, with the weights that express the state as a convex
//! combination of the vertex points. Admissibility of the combination is
//! inherited from the vertex inputs because the input set is convex.

use crate::geometry::TemplateConfig;
use crate::qp::{QpError, QpSolver, QuadraticProgram, SolveStats};
use crate::sparse::SparseMat;
use crate::tol;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VertexControlError {
    #[error("state lies outside the cross-section by {worst:.3e}")]
    OutsideTube { worst: f64 },
    #[error("interpolation weights came back inconsistent: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Result of the interpolation problem: convex weights over the vertices
/// reproducing the state.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub weights: DVector<f64>,
    pub stats: SolveStats,
}

/// Minimum-norm convex weights `lambda` with
/// `sum_j lambda_j V_j y = x`, `sum_j lambda_j = 1`, `lambda >= 0`.
///
/// Tiny negative entries from the solver are clamped and the weights
/// renormalized; anything beyond clamping tolerance is an error.
pub fn interpolation_weights(
    template: &TemplateConfig,
    y: &DVector<f64>,
    x: &DVector<f64>,
    solver: &dyn QpSolver,
) -> Result<Interpolation, VertexControlError> {
    let v = template.num_vertices();
    let nx = template.state_dim();
    assert_eq!(y.len(), template.num_facets(), "y length");
    assert_eq!(x.len(), nx, "x length");

    // States outside the cross-section have no convex representation.
    // Screen them on the facet description up front: the program below is
    // feasible for every x, so it cannot report this case itself.
    let fy = template.facets() * x - y;
    if fy.max() > tol::MEMBERSHIP * (1.0 + x.amax()) {
        return Err(VertexControlError::OutsideTube { worst: fy.max() });
    }

    // Least squares over the simplex: the position match lives in the
    // objective, so the constraints are just `sum lambda = 1`,
    // `lambda >= 0` and stay well conditioned for states parked exactly
    // on the boundary. Vertices are recentered at x, which under the
    // simplex row makes the objective w * |rebuild error|^2 plus the
    // ridge, nonnegative with no constant offset, so the solver's
    // relative gap measures the residual itself. The ridge breaks ties
    // between representations; the true optimum trades rebuild error
    // against weight norm at sqrt(ridge / weight), so the ratio must
    // stay far below the membership tolerance squared. At 1e-15 the
    // bias is near 3e-8, and a 1e-8 duality gap adds about 1e-7.
    let points = template.vertex_points(y);
    let centered: Vec<DVector<f64>> = points.iter().map(|p| p - x).collect();
    let weight = 1e6;
    let ridge = 1e-9;
    let mut h = SparseMat::zeros(v, v);
    let g = DVector::zeros(v);
    for j in 0..v {
        for k in j..v {
            let val = 2.0 * weight * centered[j].dot(&centered[k])
                + if j == k { 2.0 * ridge } else { 0.0 };
            if val != 0.0 {
                h.push(j, k, val);
                if k != j {
                    h.push(k, j, val);
                }
            }
        }
    }

    let nrows = 1 + v;
    let mut a = SparseMat::zeros(nrows, v);
    let mut lower = DVector::from_element(nrows, f64::NEG_INFINITY);
    let mut upper = DVector::zeros(nrows);
    for j in 0..v {
        a.push(0, j, 1.0);
        a.push(1 + j, j, -1.0);
    }
    lower[0] = 1.0;
    upper[0] = 1.0;

    let qp = QuadraticProgram::new(h, g, a, lower, upper)?;
    let res = solver.solve(&qp, None);
    let sol = res.optimal()?;

    // Interior-point weights sit near zero with residual-scale error;
    // clamp that, reject anything materially negative.
    let mut lambda = sol.primal.clone();
    for l in lambda.iter_mut() {
        if *l < -1e-7 {
            return Err(VertexControlError::BadWeights(format!(
                "negative weight {l:.3e}"
            )));
        }
        *l = l.max(0.0);
    }
    let total: f64 = lambda.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(VertexControlError::BadWeights(format!("weights sum to {total}")));
    }
    lambda /= total;

    let rebuilt = points
        .iter()
        .zip(lambda.iter())
        .fold(DVector::zeros(nx), |acc, (pt, &l)| acc + pt * l);
    let err = (rebuilt - x).amax();
    if err > tol::MEMBERSHIP * (1.0 + x.amax()) {
        return Err(VertexControlError::BadWeights(format!(
            "weights reproduce the state only to {err:.3e}"
        )));
    }

    Ok(Interpolation { weights: lambda, stats: res.stats })
}

/// Applied input: convex combination of the per-vertex inputs.
pub fn control_input(
    weights: &DVector<f64>,
    stacked_inputs: &DVector<f64>,
    nu: usize,
) -> DVector<f64> {
    let v = weights.len();
    assert_eq!(stacked_inputs.len(), v * nu, "stacked input length");
    let mut u = DVector::zeros(nu);
    for j in 0..v {
        u += stacked_inputs.rows(j * nu, nu) * weights[j];
    }
    u
}
