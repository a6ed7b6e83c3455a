//! Linear-program helpers built on the QP interface.
//!
//! Geometry routines phrase support functions, feasibility probes, and
//! redundancy tests as LPs over `A x <= b`. These wrappers keep the sign
//! conventions in one place: `maximize` really maximizes.

use crate::qp::{QpError, QpSolver, QpStatus, QuadraticProgram};
use crate::sparse::SparseMat;
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub enum LpOutcome {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
    Unbounded,
}

/// Maximizes `c' x` over `{x : A x <= b}`.
pub fn maximize(
    solver: &dyn QpSolver,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<LpOutcome, QpError> {
    let n = c.len();
    let m = b.len();
    let qp = QuadraticProgram::new(
        SparseMat::zeros(n, n),
        -c,
        SparseMat::from_dense(a),
        DVector::from_element(m, f64::NEG_INFINITY),
        b.clone(),
    )?;
    let res = solver.solve(&qp, None);
    match res.status {
        QpStatus::Optimal => {
            let sol = res.solution.expect("Optimal carries a solution");
            Ok(LpOutcome::Optimal { value: -sol.objective, point: sol.primal })
        }
        QpStatus::Infeasible => Ok(LpOutcome::Infeasible),
        QpStatus::Unbounded => Ok(LpOutcome::Unbounded),
        QpStatus::MaxIterations => Err(QpError::MaxIterations),
        QpStatus::NumericalError => Err(QpError::Numerical("LP solve failed".into())),
    }
}

/// Whether `{x : A x <= b}` is nonempty.
pub fn is_feasible(
    solver: &dyn QpSolver,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<bool, QpError> {
    let n = a.ncols();
    match maximize(solver, &DVector::zeros(n), a, b)? {
        LpOutcome::Optimal { .. } => Ok(true),
        LpOutcome::Infeasible => Ok(false),
        LpOutcome::Unbounded => Err(QpError::Numerical(
            "zero-objective LP reported unbounded".into(),
        )),
    }
}

/// Whether row `i` of `A x <= b` is implied by the remaining rows.
///
/// Maximizes `a_i x` subject to the other rows plus the relaxed copy
/// `a_i x <= b_i + 1`; the relaxation keeps the LP bounded whenever the
/// original row was binding at infinity. Row `i` is redundant iff the
/// maximum stays within `b_i + tol`.
pub fn row_redundant(
    solver: &dyn QpSolver,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    i: usize,
    tol: f64,
) -> Result<bool, QpError> {
    let mut rhs = b.clone();
    rhs[i] += 1.0;
    let c = a.row(i).transpose();
    match maximize(solver, &c, a, &rhs)? {
        LpOutcome::Optimal { value, .. } => Ok(value <= b[i] + tol),
        LpOutcome::Infeasible => Ok(true),
        LpOutcome::Unbounded => Ok(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::ClarabelSolver;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn unit_box() -> (DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_element(4, 1.0);
        (a, b)
    }

    #[test]
    fn support_of_unit_box() {
        let s = ClarabelSolver::default();
        let (a, b) = unit_box();
        match maximize(&s, &dvector![1.0, 1.0], &a, &b).unwrap() {
            LpOutcome::Optimal { value, point } => {
                assert_abs_diff_eq!(value, 2.0, epsilon = 1e-7);
                assert_abs_diff_eq!(point[0], 1.0, epsilon = 1e-6);
            }
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn feasibility_probe() {
        let s = ClarabelSolver::default();
        let (a, b) = unit_box();
        assert!(is_feasible(&s, &a, &b).unwrap());
        let bad = DVector::from_column_slice(&[1.0, -2.0, 1.0, 1.0]);
        assert!(!is_feasible(&s, &a, &bad).unwrap());
    }

    #[test]
    fn redundant_row_detected() {
        let s = ClarabelSolver::default();
        let (a, b) = unit_box();
        let mut rows = a.clone().insert_row(4, 0.0);
        rows[(4, 0)] = 1.0;
        rows[(4, 1)] = 0.0;
        let mut rhs = b.clone().insert_row(4, 3.0);
        // Row 4 (x <= 3) is implied by row 0 (x <= 1).
        assert!(row_redundant(&s, &rows, &rhs, 4, 1e-9).unwrap());
        // Row 0 is not implied by the rest.
        assert!(!row_redundant(&s, &rows, &rhs, 0, 1e-9).unwrap());
        // Tighten row 4 to x <= 0.5: now row 0 becomes redundant.
        rhs[4] = 0.5;
        assert!(row_redundant(&s, &rows, &rhs, 0, 1e-9).unwrap());
    }
}
