//! Risk-aware, reachability-based trajectory planning.
//!
//! The crate computes a closed-form, differentiable over-approximation of the
//! probability that a parameterized vehicle reach tube collides with
//! uncertainly-located obstacles, and uses it inside a receding-horizon
//! planner. Monte-Carlo and moment-bound baselines plus a scenario harness
//! round out the toolkit.
//!
//! Module map:
//! - [`zonotope`]: planar zonotope algebra, triangle grid covers.
//! - [`interval`]: interval scalars and 2x2 interval matrices.
//! - [`pdf`]: twice-differentiable obstacle-location densities with sound
//!   interval Hessian enclosures.
//! - [`risk`]: the closed-form collision-risk bound and its gradient.
//! - [`baselines`]: Monte-Carlo ground truth, Cantelli bound, 5-sigma boxes.
//! - [`vehicle`]: hybrid closed-loop vehicle simulation.
//! - [`reach`]: control-parameterized reach-tube construction and validation.
//! - [`planner`]: risk-constrained parameter optimization and the
//!   receding-horizon loop.
//! - [`scenario`]: scenario generation and the experiment drivers.

pub mod baselines;
pub mod config;
pub mod interval;
pub mod pdf;
pub mod planner;
pub mod reach;
pub mod report;
pub mod risk;
pub mod scenario;
pub mod vehicle;
pub mod zonotope;

pub use zonotope::{build_cover, RightTriangle, TriangleCover, Zonotope2};
