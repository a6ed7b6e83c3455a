//! Feasible-region probe for planar models.
//!
//! The set of states at which the controller is feasible is the projection
//! of a polyhedron, hence convex; its quality is judged by the Hausdorff
//! distance to the maximal robust control invariant set. The probe walks a
//! grid of horizontal lines: on each line the feasible states form an
//! interval, found by bisection against a seed carried over from the
//! previous line, to a precision two orders below the line spacing. The
//! hull of the interval endpoints is the region estimate.

use crate::geometry::{self, GeometryError, HPolytope};
use crate::mpc::{ControllerContext, MpcError};
use crate::qp::{QpError, QpSolver};
use crate::sim::SimError;
use nalgebra::DVector;

#[derive(Clone, Debug)]
pub struct RegionEstimate {
    /// Extreme feasible states per probed line, `(x1, x2)`.
    pub points: Vec<(f64, f64)>,
    /// Convex hull of the points, counterclockwise.
    pub hull: Vec<(f64, f64)>,
    /// Halfspace form of the hull.
    pub polytope: HPolytope,
    /// Controller solves spent.
    pub solves: usize,
}

struct Prober<'a> {
    ctx: &'a ControllerContext,
    r: DVector<f64>,
    solves: usize,
}

impl Prober<'_> {
    fn feasible(&mut self, x1: f64, x2: f64) -> Result<bool, SimError> {
        self.solves += 1;
        match self.ctx.solve(&DVector::from_vec(vec![x1, x2]), &self.r, None) {
            Ok(_) => Ok(true),
            Err(MpcError::Infeasible) => Ok(false),
            // A stall happens within solver tolerance of the feasibility
            // boundary; either classification moves the estimate by less
            // than the bisection precision.
            Err(MpcError::Solver(QpError::MaxIterations)) => Ok(false),
            Err(e) => Err(SimError::Solver(e.to_string())),
        }
    }

    /// Left/right feasibility boundary on a line, given one feasible seed
    /// and the horizontal box bounds. Feasibility on the line is an
    /// interval, so bisection applies on both sides.
    fn interval(
        &mut self,
        x2: f64,
        seed: f64,
        lo: f64,
        hi: f64,
        precision: f64,
    ) -> Result<(f64, f64), SimError> {
        let mut edges = [seed, seed];
        for (side, outer) in [(0usize, lo - 1.0), (1usize, hi + 1.0)] {
            let mut inner = seed;
            let mut outer = outer;
            while (outer - inner).abs() > precision {
                let mid = 0.5 * (inner + outer);
                if self.feasible(mid, x2)? {
                    inner = mid;
                } else {
                    outer = mid;
                }
            }
            edges[side] = inner;
        }
        Ok((edges[0], edges[1]))
    }

    /// Finds any feasible point on a line, trying the seed first and then
    /// scanning at the given stride.
    fn find_on_line(
        &mut self,
        x2: f64,
        seed: Option<f64>,
        lo: f64,
        hi: f64,
        stride: f64,
    ) -> Result<Option<f64>, SimError> {
        if let Some(s) = seed {
            if self.feasible(s, x2)? {
                return Ok(Some(s));
            }
        }
        let mut x1 = lo;
        while x1 <= hi + 1e-12 {
            if self.feasible(x1, x2)? {
                return Ok(Some(x1));
            }
            x1 += stride;
        }
        Ok(None)
    }
}

/// Estimates the feasible region of the controller on a planar state
/// space, sampling at the given grid resolution. The reference only
/// shifts the cost, never the constraints, so the region is
/// reference-independent; it is taken as a parameter to keep probe
/// objectives well defined.
pub fn feasible_region(
    ctx: &ControllerContext,
    r: &DVector<f64>,
    resolution: f64,
) -> Result<RegionEstimate, SimError> {
    if ctx.model().state_dim() != 2 {
        return Err(SimError::BadSetup(
            "region probe needs a two-dimensional state space".into(),
        ));
    }
    if !(resolution > 0.0) {
        return Err(SimError::BadSetup("resolution must be positive".into()));
    }
    let solver = ctx.solver();
    let bounds = state_bounds(ctx.model().state_set(), solver)
        .map_err(|e| SimError::Solver(e.to_string()))?;
    let (lo1, hi1, lo2, hi2) = bounds;
    let precision = resolution * 1e-2;

    let mut prober = Prober { ctx, r: r.clone(), solves: 0 };

    // A first feasible point, scanning lines outward from the vertical
    // middle at a coarse stride.
    let rows: Vec<f64> = grid_points(lo2, hi2, resolution);
    let mid = rows.len() / 2;
    let order: Vec<usize> = (0..rows.len())
        .map(|i| {
            let k = i as isize;
            let m = mid as isize;
            (m + if k % 2 == 0 { k / 2 } else { -(k / 2) - 1 }).rem_euclid(rows.len() as isize)
                as usize
        })
        .collect();
    let mut start_row = None;
    for &i in &order {
        if let Some(x1) = prober.find_on_line(rows[i], None, lo1, hi1, resolution * 8.0)? {
            start_row = Some((i, x1));
            break;
        }
    }
    let (start, seed_x1) = match start_row {
        Some(s) => s,
        None => {
            return Err(SimError::BadSetup(
                "no feasible state found anywhere in the state set".into(),
            ))
        }
    };

    // Expand from the start line in both directions, carrying the interval
    // midpoint as the next line's seed.
    let mut points = Vec::new();
    for dir in [1isize, -1isize] {
        let mut i = start as isize;
        let mut seed = Some(seed_x1);
        if dir < 0 {
            i -= 1;
        }
        while i >= 0 && (i as usize) < rows.len() {
            let x2 = rows[i as usize];
            let found = prober.find_on_line(x2, seed, lo1, hi1, resolution)?;
            let s = match found {
                Some(s) => s,
                None => break,
            };
            let (l, rgt) = prober.interval(x2, s, lo1, hi1, precision)?;
            // The endpoints are the last feasible bisection iterates, so
            // every hull vertex is a certified-feasible state.
            points.push((l, x2));
            if rgt > l + 1e-12 {
                points.push((rgt, x2));
            }
            seed = Some(0.5 * (l + rgt));
            i += dir;
        }
    }

    if points.len() < 3 {
        return Err(SimError::BadSetup(
            "feasible region too small for the chosen resolution".into(),
        ));
    }
    let raw: Vec<[f64; 2]> = points.iter().map(|&(a, b)| [a, b]).collect();
    let hull = geometry::hull2d::convex_hull(&raw, 1e-12);
    let polytope = geometry::hull2d::to_hrep(&raw, 1e-12)
        .map_err(|e| SimError::Solver(e.to_string()))?;
    Ok(RegionEstimate {
        points,
        hull: hull.iter().map(|p| (p[0], p[1])).collect(),
        polytope,
        solves: prober.solves,
    })
}

fn grid_points(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    // Multiples of the resolution covering [lo, hi].
    let first = (lo / resolution - 1e-9).ceil() as i64;
    let last = (hi / resolution + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * resolution).collect()
}

fn state_bounds(
    set: &HPolytope,
    solver: &dyn QpSolver,
) -> Result<(f64, f64, f64, f64), GeometryError> {
    let dirs = [
        DVector::from_vec(vec![-1.0, 0.0]),
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::from_vec(vec![0.0, -1.0]),
        DVector::from_vec(vec![0.0, 1.0]),
    ];
    let lo1 = -set.support(solver, &dirs[0])?;
    let hi1 = set.support(solver, &dirs[1])?;
    let lo2 = -set.support(solver, &dirs[2])?;
    let hi2 = set.support(solver, &dirs[3])?;
    Ok((lo1, hi1, lo2, hi2))
}

/// Convenience: Hausdorff distance between the estimated region and a
/// reference set.
pub fn region_distance(
    ctx: &ControllerContext,
    estimate: &RegionEstimate,
    reference: &HPolytope,
) -> Result<f64, SimError> {
    geometry::hausdorff_distance(ctx.solver(), &estimate.polytope, reference)
        .map_err(|e| SimError::Solver(e.to_string()))
}
