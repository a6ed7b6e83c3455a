//! Scenario files: a TOML description of the model, template, costs,
//! controller, and simulation, assembled into ready-to-run objects.
//!
//! Unknown keys are rejected everywhere so typos fail loudly instead of
//! silently falling back to defaults.

use crate::geometry::{self, GeometryError, HPolytope, TemplateConfig};
use crate::model::{
    steady_state_basis, LpvScheduler, ModelError, UncertainModel,
};
use crate::mpc::{ControllerContext, MpcConfig, MpcError};
use crate::qp;
use crate::rci::{self, RciError, RciWeights};
use crate::sim::{SimError, SimOptions, Simulator};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cost(#[from] RciError),
    #[error(transparent)]
    Controller(#[from] MpcError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: ModelSection,
    pub template: TemplateSection,
    pub rci_cost: CostSection,
    pub controller: ControllerSection,
    pub simulation: SimulationSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Certain dynamics: one pair.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    /// Polytopic dynamics: matched vertex lists.
    pub a_vertices: Option<Vec<Vec<Vec<f64>>>>,
    pub b_vertices: Option<Vec<Vec<Vec<f64>>>>,
    /// Parameter-varying dynamics on the reciprocal curve.
    pub lpv: Option<LpvSection>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub state_set: SetSection,
    pub input_set: SetSection,
    pub disturbance_set: SetSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpvSection {
    pub a0: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
    pub a2: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub range: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SetSection {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polytope { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
    Segment { from: Vec<f64>, to: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    pub facets: Option<Vec<Vec<f64>>>,
    /// Regular polygon with this many facets; planar models only.
    pub regular_polygon: Option<usize>,
    pub y_ref: Option<Vec<f64>>,
    pub y_ref_uniform: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub vertex_weight: WeightSpec,
    pub center_weight: WeightSpec,
    pub reference_weight: WeightSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum WeightSpec {
    Scaled { scale: f64 },
    Diagonal { diag: Vec<f64> },
    Full { full: Vec<Vec<f64>> },
}

impl WeightSpec {
    fn build(&self, dim: usize, what: &str) -> Result<DMatrix<f64>, ScenarioError> {
        match self {
            WeightSpec::Scaled { scale } => Ok(DMatrix::identity(dim, dim) * *scale),
            WeightSpec::Diagonal { diag } => {
                if diag.len() != dim {
                    return Err(ScenarioError::Invalid(format!(
                        "{what}: diagonal has {} entries, expected {dim}",
                        diag.len()
                    )));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
            }
            WeightSpec::Full { full } => matrix(full, what),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: usize,
    pub gamma: f64,
    /// Solver backend name; defaults to the interior-point backend.
    pub solver: Option<String>,
    pub stage_weight: Option<StageWeightSpec>,
    pub terminal_weight: Option<TerminalWeightSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum StageWeightSpec {
    /// `shape`: the vertex-deviation quadratic plus a ridge regularizer.
    Recipe { recipe: String, regularizer: Option<f64> },
    Diagonal { diag: Vec<f64> },
    Full { full: Vec<Vec<f64>> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum TerminalWeightSpec {
    /// `geometric`: stage weight divided by `1 - gamma^2`, which meets the
    /// decrease condition with equality.
    Recipe { recipe: String },
    Diagonal { diag: Vec<f64> },
    Full { full: Vec<Vec<f64>> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub steps: usize,
    pub x0: Vec<f64>,
    pub seed: Option<u64>,
    pub disturbance_policy: Option<String>,
    pub plant_policy: Option<String>,
    pub reference: Vec<ReferenceEntry>,
    pub lpv_schedule: Option<Vec<LpvEntry>>,
    pub slack: Option<f64>,
    pub settle_tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub t: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpvEntry {
    pub t: usize,
    pub range: [f64; 2],
}

/// Assembled scenario, ready to simulate.
pub struct Scenario {
    pub context: ControllerContext,
    pub scheduler: Option<LpvScheduler>,
    pub options: SimOptions,
}

impl Scenario {
    pub fn into_simulator(self) -> Result<Simulator, SimError> {
        Simulator::new(self.context, self.scheduler, self.options)
    }

    /// One-paragraph structural summary for the command line.
    pub fn describe(&self) -> String {
        let c = self.context.census();
        let t = self.context.template();
        let m = self.context.model();
        format!(
            "model: {} state(s), {} input(s), {} output(s), {} dynamics vertex(es)\n\
             template: {} facets, {} vertices, cone rows {} (raw {})\n\
             controller: horizon {}, gamma {}, {} variables, {} constraint rows\n\
             row tally: {} by closed form, {} after cone reduction",
            m.state_dim(),
            m.input_dim(),
            m.output_dim(),
            m.num_vertices(),
            t.num_facets(),
            t.num_vertices(),
            self.context.sblock().cone_rows(),
            t.raw_cone_rows(),
            self.context.config().horizon,
            self.context.config().gamma,
            c.total_vars,
            c.total_rows,
            c.formula_rows,
            c.reduced_transition_rows,
        )
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.is_empty() {
        return Err(ScenarioError::Invalid(format!("{what}: matrix has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(ScenarioError::Invalid(format!("{what}: matrix has empty rows")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ScenarioError::Invalid(format!("{what}: ragged matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn build_set(spec: &SetSection, what: &str) -> Result<HPolytope, ScenarioError> {
    match spec {
        SetSection::Box { lower, upper } => {
            if lower.len() != upper.len() {
                return Err(ScenarioError::Invalid(format!(
                    "{what}: box bounds differ in length"
                )));
            }
            Ok(HPolytope::from_box(
                &DVector::from_column_slice(lower),
                &DVector::from_column_slice(upper),
            )?)
        }
        SetSection::Polytope { normals, offsets } => {
            let a = matrix(normals, what)?;
            Ok(HPolytope::new(a, DVector::from_column_slice(offsets))?)
        }
        SetSection::Segment { from, to } => {
            if from.len() != to.len() {
                return Err(ScenarioError::Invalid(format!(
                    "{what}: segment endpoints differ in length"
                )));
            }
            Ok(geometry::segment(
                &DVector::from_column_slice(from),
                &DVector::from_column_slice(to),
            )?)
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn assemble(&self) -> Result<Scenario, ScenarioError> {
        let solver_name = self.controller.solver.as_deref().unwrap_or("clarabel");
        let solver = qp::make_solver(solver_name, qp::QpSettings::default())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        // Dynamics: exactly one of the three forms.
        let forms = [
            self.model.a.is_some() || self.model.b.is_some(),
            self.model.a_vertices.is_some() || self.model.b_vertices.is_some(),
            self.model.lpv.is_some(),
        ];
        if forms.iter().filter(|&&f| f).count() != 1 {
            return Err(ScenarioError::Invalid(
                "give exactly one of: (a, b), (a_vertices, b_vertices), lpv".into(),
            ));
        }
        let mut scheduler = None;
        let vertices: Vec<(DMatrix<f64>, DMatrix<f64>)> = if let Some(lpv) = &self.model.lpv {
            let sch = LpvScheduler::new(
                matrix(&lpv.a0, "lpv.a0")?,
                matrix(&lpv.a1, "lpv.a1")?,
                matrix(&lpv.a2, "lpv.a2")?,
                matrix(&lpv.b, "lpv.b")?,
                (lpv.range[0], lpv.range[1]),
            )?;
            let verts = sch.vertex_pairs();
            scheduler = Some(sch);
            verts
        } else if let (Some(av), Some(bv)) = (&self.model.a_vertices, &self.model.b_vertices) {
            if av.len() != bv.len() || av.is_empty() {
                return Err(ScenarioError::Invalid(
                    "a_vertices and b_vertices must be matched and nonempty".into(),
                ));
            }
            av.iter()
                .zip(bv.iter())
                .map(|(a, b)| Ok((matrix(a, "a_vertices")?, matrix(b, "b_vertices")?)))
                .collect::<Result<_, ScenarioError>>()?
        } else if let (Some(a), Some(b)) = (&self.model.a, &self.model.b) {
            vec![(matrix(a, "model.a")?, matrix(b, "model.b")?)]
        } else {
            return Err(ScenarioError::Invalid(
                "certain dynamics need both a and b".into(),
            ));
        };

        let model = UncertainModel::new(
            vertices,
            matrix(&self.model.c, "model.c")?,
            matrix(&self.model.d, "model.d")?,
            build_set(&self.model.state_set, "state_set")?,
            build_set(&self.model.input_set, "input_set")?,
            build_set(&self.model.disturbance_set, "disturbance_set")?,
        )?;

        // Template.
        let nx = model.state_dim();
        let f = match (&self.template.facets, self.template.regular_polygon) {
            (Some(rows), None) => matrix(rows, "template.facets")?,
            (None, Some(k)) => {
                if nx != 2 {
                    return Err(ScenarioError::Invalid(
                        "regular_polygon templates need a planar state space".into(),
                    ));
                }
                if k < 3 {
                    return Err(ScenarioError::Invalid(
                        "regular_polygon needs at least 3 facets".into(),
                    ));
                }
                let mut f = DMatrix::zeros(k, 2);
                for j in 0..k {
                    let ang = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                    f[(j, 0)] = ang.cos();
                    f[(j, 1)] = ang.sin();
                }
                f
            }
            _ => {
                return Err(ScenarioError::Invalid(
                    "give exactly one of template.facets, template.regular_polygon".into(),
                ))
            }
        };
        if f.ncols() != nx {
            return Err(ScenarioError::Invalid(format!(
                "template facets have {} columns, state dimension is {nx}",
                f.ncols()
            )));
        }
        let m = f.nrows();
        let y_ref = match (&self.template.y_ref, self.template.y_ref_uniform) {
            (Some(v), None) => {
                if v.len() != m {
                    return Err(ScenarioError::Invalid(format!(
                        "y_ref has {} entries, template has {m} facets",
                        v.len()
                    )));
                }
                DVector::from_column_slice(v)
            }
            (None, Some(s)) => DVector::from_element(m, s),
            _ => {
                return Err(ScenarioError::Invalid(
                    "give exactly one of template.y_ref, template.y_ref_uniform".into(),
                ))
            }
        };
        let template = TemplateConfig::derive(f, y_ref, solver.as_ref())?;

        // Costs.
        let nu = model.input_dim();
        let nz = model.output_dim();
        let weights = RciWeights {
            vertex: self.rci_cost.vertex_weight.build(nx + nu, "vertex_weight")?,
            center: self.rci_cost.center_weight.build(nx + nu, "center_weight")?,
            reference: self.rci_cost.reference_weight.build(nz, "reference_weight")?,
        };
        let basis = steady_state_basis(&model)?;
        let cost = rci::assemble_cost(&model, &template, &basis, &weights)?;

        // Controller weights.
        let zdim = cost.z_dim();
        let gamma = self.controller.gamma;
        let q = match &self.controller.stage_weight {
            None => {
                let mut q = cost.shape_quadratic();
                for i in 0..zdim {
                    q[(i, i)] += 1e-3;
                }
                q
            }
            Some(StageWeightSpec::Recipe { recipe, regularizer }) => {
                if recipe != "shape" {
                    return Err(ScenarioError::Invalid(format!(
                        "unknown stage weight recipe '{recipe}' (try \"shape\")"
                    )));
                }
                let reg = regularizer.unwrap_or(1e-3);
                let mut q = cost.shape_quadratic();
                for i in 0..zdim {
                    q[(i, i)] += reg;
                }
                q
            }
            Some(StageWeightSpec::Diagonal { diag }) => {
                if diag.len() != zdim {
                    return Err(ScenarioError::Invalid(format!(
                        "stage weight diagonal has {} entries, expected {zdim}",
                        diag.len()
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diag))
            }
            Some(StageWeightSpec::Full { full }) => matrix(full, "stage_weight")?,
        };
        let p = match &self.controller.terminal_weight {
            None | Some(TerminalWeightSpec::Recipe { .. }) => {
                if let Some(TerminalWeightSpec::Recipe { recipe }) =
                    &self.controller.terminal_weight
                {
                    if recipe != "geometric" {
                        return Err(ScenarioError::Invalid(format!(
                            "unknown terminal weight recipe '{recipe}' (try \"geometric\")"
                        )));
                    }
                }
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(ScenarioError::Invalid(format!(
                        "gamma {gamma} not in (0, 1)"
                    )));
                }
                &q / (1.0 - gamma * gamma)
            }
            Some(TerminalWeightSpec::Diagonal { diag }) => {
                if diag.len() != zdim {
                    return Err(ScenarioError::Invalid(format!(
                        "terminal weight diagonal has {} entries, expected {zdim}",
                        diag.len()
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diag))
            }
            Some(TerminalWeightSpec::Full { full }) => matrix(full, "terminal_weight")?,
        };
        let cfg = MpcConfig { horizon: self.controller.horizon, gamma, q, p };

        let context = ControllerContext::new(model, template, &basis, &weights, cfg, solver)?;

        // Simulation options.
        let sim = &self.simulation;
        let reference: Vec<(usize, DVector<f64>)> = sim
            .reference
            .iter()
            .map(|e| (e.t, DVector::from_column_slice(&e.value)))
            .collect();
        let mut options = SimOptions::new(
            sim.steps,
            DVector::from_column_slice(&sim.x0),
            reference,
        );
        if let Some(seed) = sim.seed {
            options.seed = seed;
        }
        if let Some(p) = &sim.disturbance_policy {
            options.disturbance_policy = p.clone();
        }
        if let Some(p) = &sim.plant_policy {
            options.plant_policy = p.clone();
        }
        if let Some(entries) = &sim.lpv_schedule {
            options.lpv_schedule = entries
                .iter()
                .map(|e| (e.t, (e.range[0], e.range[1])))
                .collect();
        }
        if let Some(s) = sim.slack {
            options.slack = s;
        }
        if let Some(s) = sim.settle_tolerance {
            options.settle_tolerance = s;
        }

        Ok(Scenario { context, scheduler, options })
    }
}
