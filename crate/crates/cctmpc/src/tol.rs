//! Numerical tolerances shared across modules.
//!
//! Every comparison against solver output or set membership uses one of
//! these named constants so the accepted slack is auditable in one place.
//! Values are absolute unless the name says otherwise; templates and models
//! are assumed well scaled (entries within a few orders of magnitude of 1).

/// Constraint violation accepted from a solver-reported optimum.
pub const FEASIBILITY: f64 = 1e-7;

/// KKT stationarity residual accepted from a solver-reported optimum.
pub const STATIONARITY: f64 = 1e-6;

/// Relative accuracy of reported objective values.
pub const OBJECTIVE_REL: f64 = 1e-8;

/// Slack used when checking set membership of simulated states and
/// transition feasibility of candidate solutions.
pub const MEMBERSHIP: f64 = 1e-6;

/// Relative asymmetry above which a Hessian is rejected.
pub const SYMMETRY: f64 = 1e-12;

/// Threshold for vertex dedup and facet-activity decisions.
pub const VERTEX: f64 = 1e-9;

/// Slack for configuration-cone membership `E y <= 0`.
pub const CONE: f64 = 1e-9;
