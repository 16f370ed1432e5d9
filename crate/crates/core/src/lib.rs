//! Closed-loop auto-optimization for plants whose best setpoint is unknown.
//!
//! The library tracks the extremum of an unknown polynomial performance map
//! while respecting hard state and input constraints. A set-membership
//! estimator maintains a polytopic set of parameters consistent with every
//! bounded-noise measurement seen so far; a tracking controller steers the
//! plant toward the estimated optimum; an exploring variant additionally
//! shapes its predicted trajectory so that future measurements shrink the
//! parameter set faster. A persistent-excitation check with a virtual-signal
//! fallback keeps the closed loop informative even when the optimizer parks.
//!
//! Modules are layered bottom-up:
//!
//! * [`numerics`]: dense QP/LP solver, Lyapunov and Riccati solvers.
//! * [`polytope`]: halfspace polytope calculus (intersection, redundancy
//!   removal, Chebyshev center, uniform sampling, volume, support).
//! * [`plant`]: lifted linear plant, steady-state maps, constraint sets.
//! * [`environment`]: measured performance maps and the three bundled
//!   scenarios (numerical benchmark, solar maximum-power tracking, light
//!   seeking on decoupled axes).
//! * [`estimator`]: set-membership update and sampled moments.
//! * [`excitation`]: persistent-excitation matrices, checks and fallback.
//! * [`terminal`]: terminal ingredients (gain, cost, invariant set).
//! * [`eo_mpc`] / [`al_mpc`]: the two controllers.
//! * [`simulator`]: closed-loop driver, baselines, metrics, CSV records.
//! * [`config`]: declarative scenario configuration shared with the CLI.

pub mod al_mpc;
pub mod environment;
pub mod eo_mpc;
pub mod estimator;
pub mod excitation;
pub mod numerics;
pub mod plant;
pub mod polytope;
pub mod simulator;
pub mod terminal;

pub use numerics::{Matrix, NumericsConfig, Vector};
pub use polytope::HPolytope;
