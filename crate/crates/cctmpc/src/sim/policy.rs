//! Disturbance and plant realization policies.
//!
//! Both families live behind trait objects in name-keyed registries, so a
//! scenario file picks them at runtime. Disturbance policies choose a
//! point of the disturbance set each step; plant policies choose the
//! realized vertex combination of the uncertain dynamics.

use crate::geometry::GeometryError;
use crate::model::{LpvScheduler, UncertainModel};
use crate::qp::{ClarabelSolver, QpSolver};
use crate::registry::Registry;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-step information a disturbance policy may react to. The adversary
/// sees the applied input and the realized dynamics before choosing.
pub struct DisturbanceContext<'a> {
    pub t: usize,
    pub x: &'a DVector<f64>,
    pub input: &'a DVector<f64>,
    pub realized_a: &'a DMatrix<f64>,
    pub realized_b: &'a DMatrix<f64>,
    /// Facet matrix of the template, for aiming at predicted facets.
    pub facets: &'a DMatrix<f64>,
    /// Parameter of the predicted next cross-section.
    pub next_param: &'a DVector<f64>,
}

pub trait DisturbancePolicy: Send {
    fn name(&self) -> &'static str;
    fn draw(&mut self, ctx: &DisturbanceContext, rng: &mut ChaCha8Rng) -> DVector<f64>;
}

pub trait PlantPolicy: Send {
    fn name(&self) -> &'static str;
    fn realize(
        &mut self,
        t: usize,
        model: &UncertainModel,
        scheduler: Option<&LpvScheduler>,
        rng: &mut ChaCha8Rng,
    ) -> (DMatrix<f64>, DMatrix<f64>);
}

/// Precomputed facts policies are built from.
pub struct PolicyInit {
    pub disturbance_dim: usize,
    /// Vertices of the disturbance set.
    pub vertices: Vec<DVector<f64>>,
    /// Axis-aligned bounding box of the disturbance set.
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Halfspace description, for membership tests while sampling.
    pub normals: DMatrix<f64>,
    pub offsets: DVector<f64>,
}

impl PolicyInit {
    pub fn for_model(model: &UncertainModel) -> Result<Self, GeometryError> {
        let solver = ClarabelSolver::default();
        Self::for_model_with(model, &solver)
    }

    pub fn for_model_with(
        model: &UncertainModel,
        solver: &dyn QpSolver,
    ) -> Result<Self, GeometryError> {
        let w = model.disturbance_set();
        let dim = w.dim();
        let vertices = w.vertices(solver)?;
        let mut lower = DVector::zeros(dim);
        let mut upper = DVector::zeros(dim);
        for i in 0..dim {
            let mut dir = DVector::zeros(dim);
            dir[i] = 1.0;
            upper[i] = w.support(solver, &dir)?;
            dir[i] = -1.0;
            lower[i] = -w.support(solver, &dir)?;
        }
        Ok(Self {
            disturbance_dim: dim,
            vertices,
            lower,
            upper,
            normals: w.normals().clone(),
            offsets: w.offsets().clone(),
        })
    }

    fn contains(&self, w: &DVector<f64>) -> bool {
        let r = &self.normals * w - &self.offsets;
        r.iter().all(|&v| v <= 1e-9)
    }
}

struct ZeroDisturbance {
    dim: usize,
}

impl DisturbancePolicy for ZeroDisturbance {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn draw(&mut self, _ctx: &DisturbanceContext, _rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::zeros(self.dim)
    }
}

/// Uniform over the disturbance set by rejection from its bounding box.
struct UniformDisturbance {
    init: PolicyInit,
}

impl DisturbancePolicy for UniformDisturbance {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn draw(&mut self, _ctx: &DisturbanceContext, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let dim = self.init.disturbance_dim;
        // Degenerate axes collapse the box; sample them at their midpoint.
        // Box bounds come from support solves, so the width test allows
        // their accuracy.
        loop {
            let w = DVector::from_fn(dim, |i, _| {
                let (lo, hi) = (self.init.lower[i], self.init.upper[i]);
                if hi - lo <= 1e-8 {
                    0.5 * (lo + hi)
                } else {
                    rng.gen_range(lo..hi)
                }
            });
            if self.init.contains(&w) {
                return w;
            }
        }
    }
}

/// Cycles through the vertices of the disturbance set in index order.
struct ExtremeCycleDisturbance {
    init: PolicyInit,
    next: usize,
}

impl DisturbancePolicy for ExtremeCycleDisturbance {
    fn name(&self) -> &'static str {
        "extreme-cycle"
    }

    fn draw(&mut self, _ctx: &DisturbanceContext, _rng: &mut ChaCha8Rng) -> DVector<f64> {
        let w = self.init.vertices[self.next].clone();
        self.next = (self.next + 1) % self.init.vertices.len();
        w
    }
}

/// Picks the disturbance vertex that pushes the successor state hardest
/// against the predicted next cross-section: the argmax over vertices of
/// the worst facet residual of `A x + B u + w`. Ties break to the lowest
/// index so runs are reproducible.
struct AdversarialDisturbance {
    init: PolicyInit,
}

impl DisturbancePolicy for AdversarialDisturbance {
    fn name(&self) -> &'static str {
        "adversarial"
    }

    fn draw(&mut self, ctx: &DisturbanceContext, _rng: &mut ChaCha8Rng) -> DVector<f64> {
        let nominal = ctx.realized_a * ctx.x + ctx.realized_b * ctx.input;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (k, w) in self.init.vertices.iter().enumerate() {
            let residual = ctx.facets * (&nominal + w) - ctx.next_param;
            let score = residual.max();
            if score > best_score + 1e-12 {
                best_score = score;
                best = k;
            }
        }
        self.init.vertices[best].clone()
    }
}

struct VertexPlant;

impl PlantPolicy for VertexPlant {
    fn name(&self) -> &'static str {
        "vertex"
    }

    fn realize(
        &mut self,
        _t: usize,
        model: &UncertainModel,
        _scheduler: Option<&LpvScheduler>,
        rng: &mut ChaCha8Rng,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = rng.gen_range(0..model.num_vertices());
        model.vertices()[k].clone()
    }
}

/// Random convex combination of the model vertices, weights uniform on
/// the simplex.
struct RandomPlant;

impl PlantPolicy for RandomPlant {
    fn name(&self) -> &'static str {
        "random"
    }

    fn realize(
        &mut self,
        _t: usize,
        model: &UncertainModel,
        _scheduler: Option<&LpvScheduler>,
        rng: &mut ChaCha8Rng,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = model.num_vertices();
        // Exponential spacings normalize to a uniform simplex sample.
        let mut w: Vec<f64> = (0..p).map(|_| -rng.gen_range(1e-12..1.0f64).ln()).collect();
        let total: f64 = w.iter().sum();
        for wi in w.iter_mut() {
            *wi /= total;
        }
        let (a0, b0) = &model.vertices()[0];
        let mut a = a0 * w[0];
        let mut b = b0 * w[0];
        for k in 1..p {
            let (ak, bk) = &model.vertices()[k];
            a += ak * w[k];
            b += bk * w[k];
        }
        (a, b)
    }
}

/// Realizes the scheduled parameter-varying dynamics along a smooth
/// parameter path: the first coordinate is drawn in the scheduler's
/// current range, the second follows the chord approximation of the
/// reciprocal, which stays inside the parameter hull.
struct LpvSchedulePlant;

impl PlantPolicy for LpvSchedulePlant {
    fn name(&self) -> &'static str {
        "lpv-schedule"
    }

    fn realize(
        &mut self,
        t: usize,
        model: &UncertainModel,
        scheduler: Option<&LpvScheduler>,
        rng: &mut ChaCha8Rng,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        match scheduler {
            Some(sch) => {
                let (lo, hi) = sch.range();
                let p1 = if hi - lo <= 1e-12 { lo } else { rng.gen_range(lo..hi) };
                sch.realize_on_chord(p1)
            }
            // Without a scheduler fall back to a random vertex so the
            // policy still produces an admissible realization.
            None => {
                let k = (t + rng.gen_range(0..model.num_vertices()))
                    % model.num_vertices();
                model.vertices()[k].clone()
            }
        }
    }
}

pub fn disturbance_registry() -> Registry<PolicyInit, dyn DisturbancePolicy> {
    let mut reg: Registry<PolicyInit, dyn DisturbancePolicy> = Registry::new();
    reg.register("zero", |init| {
        Ok(Box::new(ZeroDisturbance { dim: init.disturbance_dim }))
    });
    reg.register("uniform", |init| {
        Ok(Box::new(UniformDisturbance { init: init.clone_parts() }))
    });
    reg.register("extreme-cycle", |init| {
        if init.vertices.is_empty() {
            return Err("disturbance set has no vertices".into());
        }
        Ok(Box::new(ExtremeCycleDisturbance { init: init.clone_parts(), next: 0 }))
    });
    reg.register("adversarial", |init| {
        if init.vertices.is_empty() {
            return Err("disturbance set has no vertices".into());
        }
        Ok(Box::new(AdversarialDisturbance { init: init.clone_parts() }))
    });
    reg
}

pub fn plant_registry() -> Registry<PolicyInit, dyn PlantPolicy> {
    let mut reg: Registry<PolicyInit, dyn PlantPolicy> = Registry::new();
    reg.register("vertex", |_| Ok(Box::new(VertexPlant)));
    reg.register("random", |_| Ok(Box::new(RandomPlant)));
    reg.register("lpv-schedule", |_| Ok(Box::new(LpvSchedulePlant)));
    reg
}

impl PolicyInit {
    fn clone_parts(&self) -> PolicyInit {
        PolicyInit {
            disturbance_dim: self.disturbance_dim,
            vertices: self.vertices.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            normals: self.normals.clone(),
            offsets: self.offsets.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HPolytope;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;

    fn model() -> UncertainModel {
        let a1 = dmatrix![0.5, 0.1; 0.0, 0.6];
        let a2 = dmatrix![0.6, 0.0; 0.1, 0.5];
        let b = dmatrix![0.2; 0.8];
        UncertainModel::new(
            vec![(a1, b.clone()), (a2, b)],
            dmatrix![1.0, 0.0],
            dmatrix![0.0],
            HPolytope::from_box(&dvector![-4.0, -4.0], &dvector![4.0, 4.0]).unwrap(),
            HPolytope::from_box(&dvector![-2.0], &dvector![2.0]).unwrap(),
            HPolytope::from_box(&dvector![0.0, -0.5], &dvector![0.0, 0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn registries_know_their_policies() {
        let m = model();
        let init = PolicyInit::for_model(&m).unwrap();
        let dreg = disturbance_registry();
        for name in ["zero", "uniform", "extreme-cycle", "adversarial"] {
            let p = dreg.create(name, &init).unwrap();
            assert_eq!(p.name(), name);
        }
        let preg = plant_registry();
        for name in ["vertex", "random", "lpv-schedule"] {
            let p = preg.create(name, &init).unwrap();
            assert_eq!(p.name(), name);
        }
        assert!(dreg.create("nope", &init).is_err());
    }

    #[test]
    fn uniform_draws_stay_inside_and_respect_degenerate_axis() {
        let m = model();
        let init = PolicyInit::for_model(&m).unwrap();
        let mut policy = disturbance_registry().create("uniform", &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = dvector![0.0, 0.0];
        let u = dvector![0.0];
        let (a, b) = m.vertices()[0].clone();
        let f = dmatrix![1.0, 0.0];
        let y1 = dvector![1.0];
        let ctx = DisturbanceContext {
            t: 0,
            x: &x,
            input: &u,
            realized_a: &a,
            realized_b: &b,
            facets: &f,
            next_param: &y1,
        };
        for _ in 0..200 {
            let w = policy.draw(&ctx, &mut rng);
            assert!(w[0].abs() <= 1e-8);
            assert!(w[1].abs() <= 0.5 + 1e-8);
        }
    }

    #[test]
    fn adversarial_picks_worst_vertex_with_low_index_ties() {
        let m = model();
        let init = PolicyInit::for_model(&m).unwrap();
        let mut policy = disturbance_registry().create("adversarial", &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = dvector![0.0, 0.0];
        let u = dvector![0.0];
        let (a, b) = m.vertices()[0].clone();
        // Facet pointing up: the adversary should push the second state
        // coordinate up, choosing w = (0, +0.5).
        let f = dmatrix![0.0, 1.0];
        let y1 = dvector![1.0];
        let ctx = DisturbanceContext {
            t: 0,
            x: &x,
            input: &u,
            realized_a: &a,
            realized_b: &b,
            facets: &f,
            next_param: &y1,
        };
        let w = policy.draw(&ctx, &mut rng);
        assert!((w[1] - 0.5).abs() <= 1e-12, "w = {w:?}");
        // Symmetric tie (facets in both directions): lowest index wins;
        // vertex order is deterministic, so repeated draws agree.
        let f2 = dmatrix![0.0, 1.0; 0.0, -1.0];
        let y2 = dvector![1.0, 1.0];
        let ctx2 = DisturbanceContext {
            t: 0,
            x: &x,
            input: &u,
            realized_a: &a,
            realized_b: &b,
            facets: &f2,
            next_param: &y2,
        };
        let w1 = policy.draw(&ctx2, &mut rng);
        let w2 = policy.draw(&ctx2, &mut rng);
        assert_eq!(w1, w2);
    }

    #[test]
    fn random_plant_stays_in_hull() {
        let m = model();
        let init = PolicyInit::for_model(&m).unwrap();
        let mut policy = plant_registry().create("random", &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..50 {
            let (a, _) = policy.realize(t, &m, None, &mut rng);
            // Convexity in each entry: realized entries stay within the
            // entrywise envelope of the vertices.
            for r in 0..2 {
                for c in 0..2 {
                    let lo = m.vertices().iter().map(|(av, _)| av[(r, c)]).fold(f64::MAX, f64::min);
                    let hi = m.vertices().iter().map(|(av, _)| av[(r, c)]).fold(f64::MIN, f64::max);
                    assert!(a[(r, c)] >= lo - 1e-12 && a[(r, c)] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn extreme_cycle_visits_all_vertices() {
        let m = model();
        let init = PolicyInit::for_model(&m).unwrap();
        let count = init.vertices.len();
        let mut policy = disturbance_registry().create("extreme-cycle", &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = dvector![0.0, 0.0];
        let u = dvector![0.0];
        let (a, b) = m.vertices()[0].clone();
        let f = dmatrix![1.0, 0.0];
        let y1 = dvector![1.0];
        let ctx = DisturbanceContext {
            t: 0,
            x: &x,
            input: &u,
            realized_a: &a,
            realized_b: &b,
            facets: &f,
            next_param: &y1,
        };
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            let w = policy.draw(&ctx, &mut rng);
            seen.insert(format!("{:.6},{:.6}", w[0], w[1]));
        }
        assert_eq!(seen.len(), count);
    }
}
