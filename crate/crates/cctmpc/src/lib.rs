//! Configuration-constrained tube MPC.
//!
//! The controller steers a parameterized polytope of states (the tube cross
//! section) rather than a single nominal trajectory. A fixed facet template
//! `F` and a configuration cone keep every cross section `{x : F x <= y}`
//! combinatorially identical, so vertex locations depend linearly on the
//! parameter `y` and robust one-step constraints stay linear in the decision
//! variables. On top of that sit an optimal robust control invariant set
//! computation, a tracking MPC with a contractive terminal rule, and a
//! closed-loop simulator that certifies recursive feasibility and Lyapunov
//! descent along the run.
//!
//! Module map:
//! - [`sparse`]: triplet-assembled sparse matrices for solver input.
//! - [`qp`]: quadratic-program interface and the interior-point backend.
//! - [`lp`]: linear-program helpers (support functions, feasibility).
//! - [`geometry`]: polytopes, templates, vertex maps, configuration cones.
//! - [`model`]: uncertain dynamics, steady-state basis, parameter scheduling.
//! - [`tube`]: the one-step robust transition constraint block.
//! - [`rci`]: tracking cost assembly and optimal/maximal invariant sets.
//! - [`mpc`]: the tracking controller, terminal costs, Lyapunov values.
//! - [`vertex_control`]: interpolation of vertex inputs into a control law.
//! - [`sim`]: closed-loop simulation, policies, traces, region probing.
//! - [`scenario`]: scenario-file schema, validation, and runtime assembly.

pub mod geometry;
pub mod lp;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod rci;
pub mod registry;
pub mod scenario;
pub mod sim;
pub mod sparse;
pub mod tol;
pub mod tube;
pub mod vertex_control;
