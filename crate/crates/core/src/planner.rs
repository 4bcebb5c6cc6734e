//! Risk-constrained trajectory-parameter selection and the receding-horizon
//! planning loop.
//!
//! Each solve searches the candidate families in a fixed order. Per family a
//! risk evaluator is built once (covers and Hessian bounds are valid over the
//! whole parameter box) and a multi-start projected quasi-Newton descends a
//! penalty merit function using the analytic constraint gradient. A
//! parameter is accepted only if its certified risk (the closed-form
//! over-approximation) meets the threshold, so every feasible outcome carries
//! its certificate.
//!
//! The episode loop executes driving maneuvers while re-planning from the
//! predicted handoff state; when no certified plan is found it executes the
//! contingency braking tail of the previously certified plan.

use crate::baselines::five_sigma_box;
use crate::pdf::ObstacleField;
use crate::reach::{tube_to_world, ReachTube, WorldTube};
use crate::risk::{RiskError, RiskEvaluator};
use crate::vehicle::{
    self, DesiredTrajectory, FamilyKind, VehicleParams, VehicleState,
};
use crate::zonotope::{zonotopes_intersect, Zonotope2};
use nalgebra::{DVector, Vector2};
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("simulation failed: {0}")]
    Dynamics(#[from] vehicle::DynamicsError),
}

/// Built tubes the planner may choose from.
#[derive(Debug, Clone, Default)]
pub struct TubeLibrary {
    pub tubes: Vec<ReachTube>,
}

impl TubeLibrary {
    pub fn new(tubes: Vec<ReachTube>) -> Self {
        Self { tubes }
    }

    /// All tubes of the family whose velocity cell contains `z0`, with their
    /// library indices. Several tubes per (family, cell) with different
    /// parameter sub-boxes keep the generators tight; the solver tries each.
    pub fn indexed_tubes_for<'s>(
        &'s self,
        family: FamilyKind,
        z0: &'s VehicleState,
    ) -> impl Iterator<Item = (usize, &'s ReachTube)> {
        self.tubes
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.family == family && t.cell.contains(z0))
    }
}

/// Obstacle predictions supplied per planning horizon; `t_apply` is the
/// absolute time the plan starts executing.
pub trait FieldSource: Sync {
    fn field_at(&self, t_apply: f64, n_intervals: usize, interval_dt: f64) -> ObstacleField;
}

/// One risk-constrained parameter-selection instance.
pub struct PlanProblem<'a> {
    pub z0: VehicleState,
    pub waypoint: Vector2<f64>,
    pub epsilon: f64,
    pub families: &'a [FamilyKind],
    pub library: &'a TubeLibrary,
    pub field_source: &'a dyn FieldSource,
    /// Absolute time the selected plan starts executing.
    pub t_apply: f64,
    pub t_plan: f64,
    /// Wall-clock solve budget; `None` disables the deadline (load-immune
    /// reproducibility for tests). Defaults to `t_plan` in episode runs.
    pub wall_budget: Option<f64>,
    pub grid_k: usize,
    pub params: &'a VehicleParams,
    /// Replace the chance constraint by hard avoidance of per-pair 5-sigma
    /// boxes (deterministic comparison mode; Gaussian fields only).
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PlanStatus {
    Feasible {
        family: FamilyKind,
        /// Index of the chosen tube in the library.
        tube_index: usize,
        p: [f64; 2],
        certified_risk: f64,
        cost: f64,
    },
    Infeasible,
    Timeout,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanOutcome {
    pub status: PlanStatus,
    pub iterations: usize,
    pub wall_time: f64,
}

/// Accepted plan: (family, tube index, parameter, certified risk, cost).
pub type FeasiblePlan = (FamilyKind, usize, Vector2<f64>, f64, f64);

impl PlanOutcome {
    pub fn feasible(&self) -> Option<FeasiblePlan> {
        match &self.status {
            PlanStatus::Feasible { family, tube_index, p, certified_risk, cost } => {
                Some((*family, *tube_index, Vector2::new(p[0], p[1]), *certified_risk, *cost))
            }
            _ => None,
        }
    }
}

/// Squared distance between the desired trajectory's position at `t_m` and
/// the waypoint, with the waypoint pulled onto the sphere of distance
/// reachable within `t_m` so families with different maneuver durations
/// compete fairly. The position comes from trapezoid quadrature of the speed
/// and heading references in the planning frame.
pub fn maneuver_cost(
    z0: &VehicleState,
    family: FamilyKind,
    p: Vector2<f64>,
    waypoint: Vector2<f64>,
    params: &VehicleParams,
) -> f64 {
    let traj = DesiredTrajectory::new(family, z0.u);
    let steps = 48;
    let dt = traj.t_m / steps as f64;
    let mut pos = Vector2::zeros();
    let mut prev = reference_velocity(&traj, 0.0, p, params);
    for i in 0..steps {
        let next = reference_velocity(&traj, (i + 1) as f64 * dt, p, params);
        pos += 0.5 * dt * (prev + next);
        prev = next;
    }
    let world = z0.position() + crate::zonotope::rot(z0.h) * pos;
    let to_wp = waypoint - z0.position();
    let reach = (z0.u.max(3.0) * traj.t_m).min(to_wp.norm());
    let target = if to_wp.norm() > 1e-9 {
        z0.position() + to_wp / to_wp.norm() * reach
    } else {
        waypoint
    };
    (world - target).norm_squared()
}

fn reference_velocity(
    traj: &DesiredTrajectory,
    t: f64,
    p: Vector2<f64>,
    params: &VehicleParams,
) -> Vector2<f64> {
    let d = traj.eval(t, p, params);
    Vector2::new(d.u * d.h.cos(), d.u * d.h.sin())
}

/// Search each candidate family with a 5-start projected quasi-Newton on
/// `cost + penalty * max(0, risk - eps)^2` and accept the best parameter
/// whose certified risk meets the threshold.
pub fn solve_opt_e(prob: &PlanProblem) -> Result<PlanOutcome, PlanError> {
    let t0 = Instant::now();
    let deadline = t0 + std::time::Duration::from_secs_f64(prob.wall_budget.unwrap_or(1e7));
    let mut best: Option<FeasiblePlan> = None;
    let mut iterations = 0usize;
    let mut timed_out = false;

    // Candidate tubes ordered by an optimistic (obstacle-free) cost bound so
    // expensive risk evaluations start with the most promising tubes and
    // dominated ones are pruned.
    let mut candidates_by_cost: Vec<(f64, usize, FamilyKind)> = Vec::new();
    for &family in prob.families {
        for (tube_index, tube) in prob.library.indexed_tubes_for(family, &prob.z0) {
            let mut optimistic = f64::INFINITY;
            let corners = tube.p_box.corners();
            for p in corners.iter().chain([&tube.p_box.center()]) {
                optimistic = optimistic
                    .min(maneuver_cost(&prob.z0, family, *p, prob.waypoint, prob.params));
            }
            candidates_by_cost.push((optimistic, tube_index, family));
        }
    }
    candidates_by_cost.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite costs"));

    'families: for &(optimistic, tube_index, family) in &candidates_by_cost {
        if best.as_ref().is_some_and(|b| b.4 <= optimistic) {
            continue;
        }
        {
        let tube = &prob.library.tubes[tube_index];
        let Ok(world) = tube_to_world(tube, &prob.z0) else {
            continue;
        };
        let field = prob.field_source.field_at(prob.t_apply, tube.n_intervals(), tube.dt);

        if prob.deterministic {
            if let Some((p, cost)) =
                solve_deterministic(prob, &world, &field, family, &mut iterations)
            {
                if best.as_ref().map_or(true, |b| cost < b.4) {
                    best = Some((family, tube_index, p, 0.0, cost));
                }
            }
        } else {
            let evaluator = RiskEvaluator::new(&world, &field, prob.grid_k)?;
            if evaluator.triangle_count() == 0 {
                // Every obstacle pair is provably negligible over this tube:
                // the certified risk is the bare tail allowance.
                let (risk, _) = evaluator.eval(&dvec(world.p_box.center()))?;
                if risk <= prob.epsilon {
                    let mut local: Option<(Vector2<f64>, f64)> = None;
                    for p in world.p_box.corners().iter().chain([&world.p_box.center()]) {
                        let c = maneuver_cost(&prob.z0, family, *p, prob.waypoint, prob.params);
                        if local.as_ref().map_or(true, |l| c < l.1) {
                            local = Some((*p, c));
                        }
                    }
                    let (p, cost) = local.expect("nonempty starts");
                    if best.as_ref().map_or(true, |b| cost < b.4) {
                        best = Some((family, tube_index, p, risk, cost));
                    }
                    continue;
                }
            }
            let corners = world.p_box.corners();
            let mut starts =
                vec![corners[0], corners[1], corners[2], corners[3], world.p_box.center()];
            starts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
            // The descent works against the box-hulled (differentiable)
            // bound; its iterates are then re-certified with the hull
            // collapsed onto the candidate parameter, which is the bound
            // the accepted plan carries.
            let mut candidates: Vec<(Vector2<f64>, f64)> = Vec::new();
            let mut note = |p: Vector2<f64>, cost: f64, list: &mut Vec<(Vector2<f64>, f64)>| {
                if !list.iter().any(|(q, _)| (q - p).norm() < 1e-9) {
                    list.push((p, cost));
                }
            };
            for &start in &starts {
                if Instant::now() > deadline {
                    timed_out = true;
                    break;
                }
                let (found, final_p, iters) =
                    descend(prob, &world, &evaluator, family, start, deadline)?;
                iterations += iters;
                if let Some((p, _risk, cost)) = found {
                    note(p, cost, &mut candidates);
                }
                let cost =
                    maneuver_cost(&prob.z0, family, final_p, prob.waypoint, prob.params);
                note(final_p, cost, &mut candidates);
            }
            candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite costs"));
            for (p, cost) in candidates.into_iter().take(3) {
                if Instant::now() > deadline {
                    timed_out = true;
                    break;
                }
                if best.as_ref().map_or(false, |b| b.4 <= cost) {
                    continue;
                }
                let cert = evaluator.point_certificate(&dvec(p))?;
                if cert <= prob.epsilon {
                    best = Some((family, tube_index, p, cert, cost));
                    break;
                }
            }
        }
        }
        if Instant::now() > deadline {
            timed_out = true;
            break 'families;
        }
    }

    let status = match best {
        Some((family, tube_index, p, certified_risk, cost)) => {
            PlanStatus::Feasible { family, tube_index, p: [p.x, p.y], certified_risk, cost }
        }
        None if timed_out => PlanStatus::Timeout,
        None => PlanStatus::Infeasible,
    };
    Ok(PlanOutcome { status, iterations, wall_time: t0.elapsed().as_secs_f64() })
}

fn dvec(p: Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[p.x, p.y])
}

/// Projected quasi-Newton descent on the penalty merit; analytic risk
/// gradient, central differences for the cheap cost term. Returns the best
/// certified-feasible iterate seen (the penalty minimum itself may sit just
/// outside the threshold).
fn descend(
    prob: &PlanProblem,
    world: &WorldTube,
    evaluator: &RiskEvaluator,
    family: FamilyKind,
    start: Vector2<f64>,
    deadline: Instant,
) -> Result<(Option<(Vector2<f64>, f64, f64)>, Vector2<f64>, usize), PlanError> {
    const PENALTY: f64 = 1e6;
    const MAX_ITER: usize = 12;
    let pbox = &world.p_box;
    let cost = |p: Vector2<f64>| maneuver_cost(&prob.z0, family, p, prob.waypoint, prob.params);
    let merit =
        |p: Vector2<f64>, risk: f64| cost(p) + PENALTY * (risk - prob.epsilon).max(0.0).powi(2);

    let mut x = pbox.clamp(start);
    let (mut risk, mut risk_grad) = evaluator.eval(&dvec(x))?;
    let mut fx = merit(x, risk);
    let mut feasible: Option<(Vector2<f64>, f64, f64)> = None;
    let mut note_feasible = |p: Vector2<f64>, r: f64, c: f64, best: &mut Option<(Vector2<f64>, f64, f64)>| {
        if r <= prob.epsilon && best.as_ref().map_or(true, |b| c < b.2) {
            *best = Some((p, r, c));
        }
    };
    note_feasible(x, risk, cost(x), &mut feasible);
    let mut b = nalgebra::Matrix2::<f64>::identity();
    let mut prev: Option<(Vector2<f64>, Vector2<f64>)> = None;
    let mut iters = 0usize;

    for _ in 0..MAX_ITER {
        if Instant::now() > deadline {
            break;
        }
        iters += 1;
        let h = 1e-5 * (pbox.hi - pbox.lo).norm().max(1e-3);
        let cgrad = Vector2::new(
            (cost(pbox.clamp(x + Vector2::new(h, 0.0)))
                - cost(pbox.clamp(x - Vector2::new(h, 0.0))))
                / (2.0 * h),
            (cost(pbox.clamp(x + Vector2::new(0.0, h)))
                - cost(pbox.clamp(x - Vector2::new(0.0, h))))
                / (2.0 * h),
        );
        let excess = (risk - prob.epsilon).max(0.0);
        let rgrad = Vector2::new(risk_grad[0], risk_grad[1]);
        let grad = cgrad + 2.0 * PENALTY * excess * rgrad;

        if let Some((px, pg)) = prev {
            let s = x - px;
            let y = grad - pg;
            let sy = s.dot(&y);
            if sy > 1e-12 {
                let rho = 1.0 / sy;
                let i = nalgebra::Matrix2::identity();
                let left = i - rho * s * y.transpose();
                b = left * b * left.transpose() + rho * s * s.transpose();
            }
        }
        prev = Some((x, grad));

        let mut dir = -(b * grad);
        if dir.dot(&grad) >= 0.0 {
            dir = -grad;
            b = nalgebra::Matrix2::identity();
        }
        let mut alpha = 1.0;
        let mut advanced = false;
        for _ in 0..20 {
            let cand = pbox.clamp(x + alpha * dir);
            if (cand - x).norm() < 1e-12 {
                break;
            }
            let (crisk, crgrad) = evaluator.eval(&dvec(cand))?;
            let fc = merit(cand, crisk);
            if crisk <= prob.epsilon {
                note_feasible(cand, crisk, cost(cand), &mut feasible);
            }
            if fc < fx - 1e-4 * alpha * grad.norm() * (cand - x).norm() {
                x = cand;
                fx = fc;
                risk = crisk;
                risk_grad = crgrad;
                advanced = true;
                break;
            }
            alpha *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    Ok((feasible, x, iters))
}

/// Deterministic comparison mode: grid search over the parameter box for the
/// cheapest parameter whose buffered reach sets avoid every 5-sigma box.
fn solve_deterministic(
    prob: &PlanProblem,
    world: &WorldTube,
    field: &ObstacleField,
    family: FamilyKind,
    iterations: &mut usize,
) -> Option<(Vector2<f64>, f64)> {
    let boxes: Vec<Vec<Zonotope2>> = (0..field.n_obstacles())
        .map(|i| {
            (0..field.n_intervals())
                .map(|j| five_sigma_box(field.pdf(i, j)).expect("gaussian scenario mode"))
                .collect()
        })
        .collect();
    let n = 15;
    let pbox = &world.p_box;
    let mut best: Option<(Vector2<f64>, f64)> = None;
    for iy in 0..n {
        for ix in 0..n {
            *iterations += 1;
            let frac = |i: usize| i as f64 / (n - 1) as f64;
            let p = Vector2::new(
                pbox.lo.x + (pbox.hi.x - pbox.lo.x) * frac(ix),
                pbox.lo.y + (pbox.hi.y - pbox.lo.y) * frac(iy),
            );
            let pv = dvec(p);
            let clear = (0..world.n_intervals()).all(|j| {
                let mut reach = world.zonotope_at(j, &pv);
                reach.generators.extend_from_slice(&field.obstacle_generators);
                boxes.iter().all(|per_i| !zonotopes_intersect(&reach, &per_i[j]))
            });
            if clear {
                let cost = maneuver_cost(&prob.z0, family, p, prob.waypoint, prob.params);
                if best.as_ref().map_or(true, |b| cost < b.1) {
                    best = Some((p, cost));
                }
            }
        }
    }
    best
}

/// Episode configuration for the receding-horizon loop.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub epsilon: f64,
    pub t_plan: f64,
    pub grid_k: usize,
    pub sim_dt: f64,
    /// Wall-clock solve budget; `None` disables deadlines.
    pub wall_budget: Option<f64>,
    /// Episode cutoff in absolute seconds.
    pub max_time: f64,
    /// While still stopped at the start, keep retrying the initial solve
    /// every `t_plan` seconds instead of terminating.
    pub wait_at_start: bool,
    pub families: Vec<FamilyKind>,
    pub deterministic: bool,
    /// Collision check spacing [s].
    pub collision_dt: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            t_plan: 3.0,
            grid_k: 24,
            sim_dt: 1e-3,
            wall_budget: Some(3.0),
            max_time: 60.0,
            wait_at_start: false,
            families: vec![
                FamilyKind::LaneChange,
                FamilyKind::DirectionChange,
                FamilyKind::SpeedChange,
            ],
            deterministic: false,
            collision_dt: 0.01,
        }
    }
}

/// World the episode runs against: sampled true obstacle motion for crash
/// checks plus the predicted fields handed to the planner.
pub trait Environment: FieldSource {
    /// True obstacle footprints at absolute time `t_abs`.
    fn obstacle_footprints(&self, t_abs: f64) -> Vec<Zonotope2>;
    /// Current waypoint for the given state.
    fn waypoint(&self, z: &VehicleState, t_abs: f64) -> Vector2<f64>;
    /// Episode success predicate.
    fn reached_goal(&self, z: &VehicleState) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EpisodeEnd {
    /// Goal reached.
    Success,
    /// Ego footprint intersected a true obstacle footprint.
    Crash,
    /// Contingency braking executed to a stop, or never started.
    SafeStop,
    /// Time limit expired.
    Other,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    /// Absolute time the solve was issued.
    pub t: f64,
    pub outcome: PlanOutcome,
}

/// A certified plan the episode actually executed.
#[derive(Debug, Clone, Serialize)]
pub struct ExecutedPlan {
    pub family: FamilyKind,
    pub tube_index: usize,
    pub p: [f64; 2],
    pub z0: VehicleState,
    pub t_apply: f64,
    pub certified_risk: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeLog {
    pub end: EpisodeEnd,
    pub iterations: Vec<IterationLog>,
    pub time_to_goal: Option<f64>,
    pub distance_traveled: f64,
    /// Executed trace at collision-check resolution: (t_abs, x, y, h, u).
    pub trace: Vec<(f64, f64, f64, f64, f64)>,
    /// Largest certified risk among executed plans.
    pub max_certified_risk: f64,
    pub executed_plans: Vec<ExecutedPlan>,
}

enum SegmentEnd {
    Done(VehicleState),
    Crashed(f64),
    Goal(f64),
}

/// Step `(traj, p)` onward from `state` (whose local clock is already set)
/// for `duration` seconds, collision-checking against the environment.
/// `t_base` maps the trajectory's local clock to absolute time.
#[allow(clippy::too_many_arguments)]
fn run_segment(
    env: &dyn Environment,
    cfg: &EpisodeConfig,
    params: &VehicleParams,
    traj: &DesiredTrajectory,
    p: Vector2<f64>,
    mut state: VehicleState,
    h_ref: f64,
    t_base: f64,
    duration: f64,
    log: &mut EpisodeLog,
) -> Result<SegmentEnd, PlanError> {
    let steps = (duration / cfg.sim_dt).round() as usize;
    let check_every = (cfg.collision_dt / cfg.sim_dt).round().max(1.0) as usize;
    for step_idx in 0..steps {
        state = vehicle::step(&state, params, traj, p, h_ref, cfg.sim_dt, [0.0; 3])?;
        if step_idx % check_every == 0 || step_idx + 1 == steps {
            let now = t_base + state.t;
            log.trace.push((now, state.x, state.y, state.h, state.u));
            let fp = vehicle::footprint_at(&state, params);
            if env.obstacle_footprints(now).iter().any(|obs| zonotopes_intersect(&fp, obs)) {
                return Ok(SegmentEnd::Crashed(now));
            }
            if env.reached_goal(&state) {
                return Ok(SegmentEnd::Goal(now));
            }
        }
    }
    Ok(SegmentEnd::Done(state))
}

/// Collision checks for a parked vehicle over a waiting window.
fn parked_checks(
    env: &dyn Environment,
    cfg: &EpisodeConfig,
    params: &VehicleParams,
    z: &VehicleState,
    t_base: f64,
    duration: f64,
    log: &mut EpisodeLog,
) -> Option<f64> {
    let fp = vehicle::footprint_at(z, params);
    let checks = (duration / cfg.collision_dt).round() as usize;
    for c in 0..=checks {
        let now = t_base + c as f64 * cfg.collision_dt;
        if env.obstacle_footprints(now).iter().any(|obs| zonotopes_intersect(&fp, obs)) {
            return Some(now);
        }
    }
    log.trace.push((t_base + duration, z.x, z.y, z.h, z.u));
    None
}

/// Run one receding-horizon episode.
///
/// The loop alternates maneuver execution and re-planning synchronously:
/// each solve uses the predicted handoff state of the currently executing
/// maneuver (exact under zero disturbance) and is applied at the handoff
/// instant. On solve failure the previously certified contingency braking
/// tail runs to a stop.
pub fn run_receding_horizon(
    z_start: &VehicleState,
    env: &dyn Environment,
    library: &TubeLibrary,
    params: &VehicleParams,
    cfg: &EpisodeConfig,
) -> Result<EpisodeLog, PlanError> {
    let mut log = EpisodeLog {
        end: EpisodeEnd::Other,
        iterations: Vec::new(),
        time_to_goal: None,
        distance_traveled: 0.0,
        trace: Vec::new(),
        max_certified_risk: 0.0,
        executed_plans: Vec::new(),
    };
    let start_pos = z_start.position();
    let mut t_abs = 0.0;
    let mut z = *z_start;
    let stopped_start = z.u == 0.0;
    let hold = DesiredTrajectory::new(FamilyKind::SpeedChange, z.u);
    let hold_p = Vector2::new(z.u, 0.0);

    // Initial certification: the vehicle is parked (or holds speed) during
    // each planning window.
    let mut current: Option<(Vector2<f64>, DesiredTrajectory)> = None;
    while t_abs <= cfg.max_time {
        let predicted = if stopped_start {
            z
        } else {
            let trace =
                vehicle::simulate(&hold, hold_p, &z, params, cfg.sim_dt, &vehicle::Disturbance::Zero)?;
            let idx = (cfg.t_plan / cfg.sim_dt).round() as usize;
            trace[idx.min(trace.len() - 1)].reset_clock()
        };
        let outcome = solve_opt_e(&PlanProblem {
            z0: predicted,
            waypoint: env.waypoint(&predicted, t_abs + cfg.t_plan),
            epsilon: cfg.epsilon,
            families: &cfg.families,
            library,
            field_source: as_field_source(env),
            t_apply: t_abs + cfg.t_plan,
            t_plan: cfg.t_plan,
            wall_budget: cfg.wall_budget,
            grid_k: cfg.grid_k,
            params,
            deterministic: cfg.deterministic,
        })?;
        log.iterations.push(IterationLog { t: t_abs, outcome: outcome.clone() });
        let feasible = outcome.feasible();

        // The planning window elapses in simulation time.
        if stopped_start {
            if let Some(t_hit) = parked_checks(env, cfg, params, &z, t_abs, cfg.t_plan, &mut log) {
                log.end = EpisodeEnd::Crash;
                log.time_to_goal = Some(t_hit);
                return finish(log, z, start_pos);
            }
        } else {
            match run_segment(env, cfg, params, &hold, hold_p, z.reset_clock(), z.h, t_abs, cfg.t_plan, &mut log)? {
                SegmentEnd::Done(s) => z = s.reset_clock(),
                SegmentEnd::Crashed(_) => {
                    log.end = EpisodeEnd::Crash;
                    return finish(log, z, start_pos);
                }
                SegmentEnd::Goal(t) => {
                    log.end = EpisodeEnd::Success;
                    log.time_to_goal = Some(t);
                    return finish(log, z, start_pos);
                }
            }
        }
        t_abs += cfg.t_plan;

        if let Some((family, tube_index, p, risk, _cost)) = feasible {
            log.max_certified_risk = log.max_certified_risk.max(risk);
            log.executed_plans.push(ExecutedPlan {
                family,
                tube_index,
                p: [p.x, p.y],
                z0: predicted,
                t_apply: t_abs,
                certified_risk: risk,
            });
            z = predicted;
            current = Some((p, DesiredTrajectory::new(family, predicted.u)));
            break;
        }
        if stopped_start && cfg.wait_at_start {
            continue;
        }
        if stopped_start {
            // Never started; remaining stopped is the safe terminal outcome.
            log.end = EpisodeEnd::SafeStop;
            return finish(log, z, start_pos);
        }
        // Moving start without any certified plan: brake on the hold profile
        // (bootstrap fallback before the first certificate exists).
        let brake = DesiredTrajectory::new(FamilyKind::SpeedChange, z.u);
        let bp = Vector2::new(0.0, 0.0);
        match run_segment(env, cfg, params, &brake, bp, z.reset_clock(), z.h, t_abs, brake.t_f, &mut log)? {
            SegmentEnd::Crashed(_) => log.end = EpisodeEnd::Crash,
            SegmentEnd::Goal(t) => {
                log.end = EpisodeEnd::Success;
                log.time_to_goal = Some(t);
            }
            SegmentEnd::Done(s) => {
                z = s;
                log.end = EpisodeEnd::SafeStop;
            }
        }
        return finish(log, z, start_pos);
    }

    // Main loop: execute the certified driving maneuver, then either chain
    // into the next certified plan or brake on the current one's tail.
    while let Some((p, traj)) = current.take() {
        if t_abs > cfg.max_time {
            log.end = EpisodeEnd::Other;
            return finish(log, z, start_pos);
        }
        let maneuver_start = t_abs;
        let seg = run_segment(
            env,
            cfg,
            params,
            &traj,
            p,
            z.reset_clock(),
            z.h,
            maneuver_start,
            traj.t_m,
            &mut log,
        )?;
        let at_handoff = match seg {
            SegmentEnd::Crashed(_) => {
                log.end = EpisodeEnd::Crash;
                return finish(log, z, start_pos);
            }
            SegmentEnd::Goal(t) => {
                log.end = EpisodeEnd::Success;
                log.time_to_goal = Some(t);
                return finish(log, z, start_pos);
            }
            SegmentEnd::Done(s) => s,
        };
        t_abs += traj.t_m;

        // Re-plan from the handoff state (the prediction made at maneuver
        // start coincides with it under zero disturbance).
        let predicted = at_handoff.reset_clock();
        let outcome = solve_opt_e(&PlanProblem {
            z0: predicted,
            waypoint: env.waypoint(&predicted, t_abs),
            epsilon: cfg.epsilon,
            families: &cfg.families,
            library,
            field_source: as_field_source(env),
            t_apply: t_abs,
            t_plan: cfg.t_plan,
            wall_budget: cfg.wall_budget,
            grid_k: cfg.grid_k,
            params,
            deterministic: cfg.deterministic,
        })?;
        log.iterations.push(IterationLog { t: maneuver_start, outcome: outcome.clone() });

        match outcome.feasible() {
            Some((family, tube_index, p_next, risk, _cost)) => {
                log.max_certified_risk = log.max_certified_risk.max(risk);
                log.executed_plans.push(ExecutedPlan {
                    family,
                    tube_index,
                    p: [p_next.x, p_next.y],
                    z0: predicted,
                    t_apply: t_abs,
                    certified_risk: risk,
                });
                z = predicted;
                current = Some((p_next, DesiredTrajectory::new(family, predicted.u)));
            }
            None => {
                // Contingency braking: continue the same certified
                // trajectory from its handoff state to t_f.
                let tail = run_segment(
                    env,
                    cfg,
                    params,
                    &traj,
                    p,
                    at_handoff,
                    z.h,
                    maneuver_start,
                    traj.t_f - traj.t_m,
                    &mut log,
                )?;
                match tail {
                    SegmentEnd::Crashed(_) => log.end = EpisodeEnd::Crash,
                    SegmentEnd::Goal(t) => {
                        log.end = EpisodeEnd::Success;
                        log.time_to_goal = Some(t);
                    }
                    SegmentEnd::Done(s) => {
                        z = s;
                        log.end = EpisodeEnd::SafeStop;
                    }
                }
                return finish(log, z, start_pos);
            }
        }
    }

    log.end = EpisodeEnd::Other;
    finish(log, z, start_pos)
}

fn finish(
    mut log: EpisodeLog,
    z: VehicleState,
    start_pos: Vector2<f64>,
) -> Result<EpisodeLog, PlanError> {
    log.distance_traveled = (z.position() - start_pos).norm();
    Ok(log)
}

fn as_field_source(env: &dyn Environment) -> &dyn FieldSource {
    env
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdf::{Gaussian, PdfModel};
    use crate::reach::{build_tube, BuildConfig, ParamBox, VelocityCell};
    use nalgebra::Matrix2;

    struct StaticEnv {
        /// Obstacle means (constant in time) with shared sigma.
        obstacles: Vec<Vector2<f64>>,
        sigma: f64,
        waypoint: Vector2<f64>,
        footprint: Vector2<f64>,
    }

    impl FieldSource for StaticEnv {
        fn field_at(&self, _t: f64, n_intervals: usize, _dt: f64) -> ObstacleField {
            let pdfs = self
                .obstacles
                .iter()
                .map(|mu| {
                    (0..n_intervals)
                        .map(|_| {
                            PdfModel::Gaussian(
                                Gaussian::new(*mu, Matrix2::identity() * self.sigma * self.sigma)
                                    .unwrap(),
                            )
                        })
                        .collect()
                })
                .collect();
            ObstacleField::new(
                pdfs,
                vec![
                    Vector2::new(self.footprint.x, 0.0),
                    Vector2::new(0.0, self.footprint.y),
                ],
            )
            .unwrap()
        }
    }

    impl Environment for StaticEnv {
        fn obstacle_footprints(&self, _t: f64) -> Vec<Zonotope2> {
            self.obstacles
                .iter()
                .map(|mu| Zonotope2::aabb(*mu, self.footprint))
                .collect()
        }

        fn waypoint(&self, _z: &VehicleState, _t: f64) -> Vector2<f64> {
            self.waypoint
        }

        fn reached_goal(&self, z: &VehicleState) -> bool {
            (z.position() - self.waypoint).norm() < 3.0
        }
    }

    /// Narrow parameter bins keep the Hessian-supremum hull tight; the
    /// solver searches across bins.
    fn small_library(params: &VehicleParams) -> TubeLibrary {
        let cfg = BuildConfig::default();
        let cell = VelocityCell { u: (13.0, 16.0), v: (-0.6, 0.6), r: (-0.25, 0.25) };
        let mut tubes = Vec::new();
        for (lo, hi) in [(9.0, 10.0), (12.0, 13.0), (15.0, 16.0), (17.0, 18.0)] {
            tubes.push(
                build_tube(
                    FamilyKind::SpeedChange,
                    cell,
                    ParamBox::new(Vector2::new(lo, 0.0), Vector2::new(hi, 0.0)),
                    params,
                    &cfg,
                )
                .unwrap(),
            );
        }
        for (ylo, yhi) in [(0.03, 0.05), (-0.05, -0.03)] {
            tubes.push(
                build_tube(
                    FamilyKind::LaneChange,
                    cell,
                    ParamBox::new(Vector2::new(14.0, ylo), Vector2::new(15.0, yhi)),
                    params,
                    &cfg,
                )
                .unwrap(),
            );
        }
        TubeLibrary::new(tubes)
    }

    #[test]
    fn empty_road_is_feasible_with_negligible_risk() {
        let params = VehicleParams::default();
        let library = small_library(&params);
        let env = StaticEnv {
            obstacles: vec![],
            sigma: 0.4,
            waypoint: Vector2::new(120.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.5, &params);
        let outcome = solve_opt_e(&PlanProblem {
            z0,
            waypoint: env.waypoint(&z0, 0.0),
            epsilon: 0.05,
            families: &[FamilyKind::SpeedChange, FamilyKind::LaneChange],
            library: &library,
            field_source: &env,
            t_apply: 0.0,
            t_plan: 3.0,
            wall_budget: None,
            grid_k: 24,
            params: &params,
            deterministic: false,
        })
        .unwrap();
        let (_, _, _, risk, cost) = outcome.feasible().expect("feasible on empty road");
        assert!(risk < 1e-10, "risk {risk}");
        // The unconstrained minimum drives straight at the best commanded
        // speed available in any bin; compare against a dense sweep over the
        // bins' union.
        let mut best = f64::INFINITY;
        for (lo, hi) in [(9.0, 10.0), (12.0, 13.0), (15.0, 16.0), (17.0, 18.0)] {
            for k in 0..=100 {
                let pu = lo + (hi - lo) * k as f64 / 100.0;
                best = best.min(maneuver_cost(
                    &z0,
                    FamilyKind::SpeedChange,
                    Vector2::new(pu, 0.0),
                    env.waypoint(&z0, 0.0),
                    &params,
                ));
            }
        }
        assert!(cost <= best + 1.0, "cost {cost} vs sweep best {best}");
    }

    #[test]
    fn zero_epsilon_with_nearby_obstacle_is_infeasible() {
        let params = VehicleParams::default();
        let library = small_library(&params);
        let env = StaticEnv {
            obstacles: vec![Vector2::new(30.0, 0.0)],
            sigma: 0.5,
            waypoint: Vector2::new(120.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.5, &params);
        let outcome = solve_opt_e(&PlanProblem {
            z0,
            waypoint: env.waypoint(&z0, 0.0),
            epsilon: 0.0,
            families: &[FamilyKind::SpeedChange],
            library: &library,
            field_source: &env,
            t_apply: 0.0,
            t_plan: 3.0,
            wall_budget: None,
            grid_k: 16,
            params: &params,
            deterministic: false,
        })
        .unwrap();
        assert_eq!(outcome.status, PlanStatus::Infeasible);
    }

    #[test]
    fn threshold_separates_tight_gap() {
        // A wide-uncertainty obstacle just beyond the slowest stopping
        // envelope: acceptable at eps = 0.2, not at eps = 0.01.
        let params = VehicleParams::default();
        let library = small_library(&params);
        let env = StaticEnv {
            obstacles: vec![Vector2::new(52.0, 0.0)],
            sigma: 2.5,
            waypoint: Vector2::new(120.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.5, &params);
        let solve = |eps: f64| {
            solve_opt_e(&PlanProblem {
                z0,
                waypoint: env.waypoint(&z0, 0.0),
                epsilon: eps,
                families: &[FamilyKind::SpeedChange],
                library: &library,
                field_source: &env,
                t_apply: 0.0,
                t_plan: 3.0,
                wall_budget: None,
                grid_k: 24,
                params: &params,
                deterministic: false,
            })
            .unwrap()
        };
        let loose = solve(0.2);
        let tight = solve(0.01);
        assert!(loose.feasible().is_some(), "loose threshold should pass: {:?}", loose.status);
        assert_eq!(tight.status, PlanStatus::Infeasible);
        let (_, _, _, risk, _) = loose.feasible().unwrap();
        assert!(risk <= 0.2 && risk > 0.01, "certified risk {risk}");
    }

    #[test]
    fn empty_road_episode_reaches_goal() {
        let params = VehicleParams::default();
        let library = small_library(&params);
        let env = StaticEnv {
            obstacles: vec![],
            sigma: 0.4,
            waypoint: Vector2::new(100.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.5, &params);
        let cfg = EpisodeConfig {
            families: vec![FamilyKind::SpeedChange],
            grid_k: 16,
            max_time: 30.0,
            wall_budget: None,
            ..EpisodeConfig::default()
        };
        let log = run_receding_horizon(&z0, &env, &library, &params, &cfg).unwrap();
        assert_eq!(log.end, EpisodeEnd::Success, "iterations: {:?}", log.iterations.len());
        assert!(log.time_to_goal.unwrap() < 15.0);
    }

    #[test]
    fn blocked_road_stops_safely() {
        let params = VehicleParams::default();
        let library = small_library(&params);
        // A wall of obstacles across every lane 60 m ahead.
        let env = StaticEnv {
            obstacles: (0..9)
                .map(|k| Vector2::new(60.0, -8.0 + 2.0 * k as f64))
                .collect(),
            sigma: 0.6,
            waypoint: Vector2::new(140.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.5, &params);
        let cfg = EpisodeConfig {
            families: vec![FamilyKind::SpeedChange, FamilyKind::LaneChange],
            grid_k: 16,
            max_time: 40.0,
            epsilon: 0.05,
            wall_budget: None,
            ..EpisodeConfig::default()
        };
        let log = run_receding_horizon(&z0, &env, &library, &params, &cfg).unwrap();
        assert_eq!(log.end, EpisodeEnd::SafeStop, "log: {:?}", log.end);
        // Stopped before the wall.
        let last = log.trace.last().unwrap();
        assert!(last.4.abs() < 0.01, "still moving: u = {}", last.4);
        assert!(last.1 < 57.0, "stopped too late: x = {}", last.1);
    }

    #[test]
    fn episodes_are_deterministic() {
        let params = VehicleParams::default();
        let library = small_library(&params);
        let env = StaticEnv {
            obstacles: vec![Vector2::new(70.0, 1.5)],
            sigma: 0.8,
            waypoint: Vector2::new(110.0, 0.0),
            footprint: Vector2::new(2.4, 1.0),
        };
        let z0 = VehicleState::moving(0.0, 0.0, 0.0, 14.0, &params);
        let cfg = EpisodeConfig {
            families: vec![FamilyKind::SpeedChange, FamilyKind::LaneChange],
            grid_k: 16,
            max_time: 30.0,
            wall_budget: None,
            ..EpisodeConfig::default()
        };
        let a = run_receding_horizon(&z0, &env, &library, &params, &cfg).unwrap();
        let b = run_receding_horizon(&z0, &env, &library, &params, &cfg).unwrap();
        assert_eq!(a.end, b.end);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.time_to_goal, b.time_to_goal);
    }
}
