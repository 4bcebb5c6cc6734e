//! Scenario generation, obstacle-field construction and experiment drivers.
//!
//! Highway and unprotected-left-turn scenarios share one traffic model:
//! obstacles move along lane axes at constant speed, their per-interval
//! location densities are Gaussians whose 3-sigma box matches the lane width
//! and the distance covered per interval, and each trial samples true
//! per-interval positions from those densities.

use crate::baselines::{cantelli_risk, mc_risk};
use crate::pdf::{Gaussian, Mixture, ObstacleField, PdfModel, BivariateBeta};
use crate::planner::{
    run_receding_horizon, EpisodeConfig, EpisodeEnd, EpisodeLog, Environment, FieldSource,
    TubeLibrary,
};
use crate::reach::{build_tube, BuildConfig, ParamBox, VelocityCell, WorldInterval, WorldTube};
use crate::risk::risk_and_grad;
use crate::vehicle::{FamilyKind, VehicleParams, VehicleState};
use crate::zonotope::{rot, Zonotope2};
use nalgebra::{DVector, Matrix2, Matrix2xX, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::OnceLock;
use thiserror::Error;

/// Fixed lane width [m]; the lateral 3-sigma rule embeds it.
pub const LANE_WIDTH: f64 = 3.7;

/// Planning-interval width shared by tubes and obstacle fields [s].
pub const INTERVAL_DT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("obstacle footprint (width {0} m) does not fit a {LANE_WIDTH} m lane")]
    ObstacleTooWide(f64),
    #[error(transparent)]
    Plan(#[from] crate::planner::PlanError),
    #[error(transparent)]
    Tube(#[from] crate::reach::TubeError),
}

/// One traffic participant moving along a lane axis at constant speed.
#[derive(Debug, Clone)]
pub struct TrafficObstacle {
    /// Unit direction of travel.
    pub axis: Vector2<f64>,
    /// Position of the footprint center at t = 0.
    pub start: Vector2<f64>,
    /// Signed speed along the axis [m/s]; 0 for static obstacles.
    pub speed: f64,
    /// Footprint half-extents (along axis, across axis).
    pub half: Vector2<f64>,
    pub is_static: bool,
}

impl TrafficObstacle {
    pub fn mean_at(&self, t: f64) -> Vector2<f64> {
        self.start + self.axis * (self.speed * t)
    }

    fn heading(&self) -> f64 {
        self.axis.y.atan2(self.axis.x)
    }

    /// Lane-frame covariance: the 3-sigma box covers the swept length
    /// `L + |u| dt` and the lane slack `LANE_WIDTH - W`.
    fn cov(&self) -> Matrix2<f64> {
        let sigma_lon = (2.0 * self.half.x + self.speed.abs() * INTERVAL_DT) / 6.0;
        let sigma_lat = (LANE_WIDTH - 2.0 * self.half.y) / 6.0;
        let r = rot(self.heading());
        r * Matrix2::new(sigma_lon * sigma_lon, 0.0, 0.0, sigma_lat * sigma_lat) * r.transpose()
    }

    /// Density of the center location during the interval centered at
    /// `t_mid` (absolute seconds).
    pub fn pdf_at(&self, t_mid: f64) -> PdfModel {
        PdfModel::Gaussian(Gaussian::new(self.mean_at(t_mid), self.cov()).expect("SPD lane cov"))
    }

    /// Footprint zonotope at a given center.
    pub fn footprint(&self, center: Vector2<f64>) -> Zonotope2 {
        let r = rot(self.heading());
        Zonotope2::new(center, vec![
            r * Vector2::new(self.half.x, 0.0),
            r * Vector2::new(0.0, self.half.y),
        ])
    }
}

/// Shared obstacle generator matrix: per-axis hull of every obstacle's
/// footprint box in the world frame.
pub fn obstacle_generators(obstacles: &[TrafficObstacle]) -> Vec<Vector2<f64>> {
    let mut hx: f64 = 0.0;
    let mut hy: f64 = 0.0;
    for o in obstacles {
        let r = rot(o.heading());
        let gx = r * Vector2::new(o.half.x, 0.0);
        let gy = r * Vector2::new(0.0, o.half.y);
        hx = hx.max(gx.x.abs() + gy.x.abs());
        hy = hy.max(gx.y.abs() + gy.y.abs());
    }
    vec![Vector2::new(hx, 0.0), Vector2::new(0.0, hy)]
}

/// Per-interval obstacle field for a horizon of `n_intervals` starting at
/// absolute time `t_apply`.
pub fn build_obstacle_field(
    obstacles: &[TrafficObstacle],
    t_apply: f64,
    n_intervals: usize,
    interval_dt: f64,
) -> Result<ObstacleField, ScenarioError> {
    for o in obstacles {
        if 2.0 * o.half.y >= LANE_WIDTH {
            return Err(ScenarioError::ObstacleTooWide(2.0 * o.half.y));
        }
    }
    let pdfs = obstacles
        .iter()
        .map(|o| {
            (0..n_intervals)
                .map(|j| o.pdf_at(t_apply + (j as f64 + 0.5) * interval_dt))
                .collect()
        })
        .collect();
    Ok(ObstacleField::new(pdfs, obstacle_generators(obstacles)).expect("rectangular"))
}

/// Sampled true obstacle motion: per-interval center draws on a global
/// interval grid, interpolated piecewise-linearly between midpoints.
/// Static obstacles are sampled once and held.
#[derive(Debug, Clone)]
pub struct TrueTraces {
    /// `positions[i][j]` is obstacle i's sampled center for global interval j.
    pub positions: Vec<Vec<Vector2<f64>>>,
    pub interval_dt: f64,
}

pub fn sample_true_trajectories(
    obstacles: &[TrafficObstacle],
    horizon: f64,
    seed: u64,
) -> TrueTraces {
    let n_intervals = (horizon / INTERVAL_DT).ceil() as usize + 2;
    let positions = obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            if o.is_static {
                let fixed = o.pdf_at(0.0).sample(&mut rng);
                vec![fixed; n_intervals]
            } else {
                (0..n_intervals)
                    .map(|j| o.pdf_at((j as f64 + 0.5) * INTERVAL_DT).sample(&mut rng))
                    .collect()
            }
        })
        .collect();
    TrueTraces { positions, interval_dt: INTERVAL_DT }
}

impl TrueTraces {
    /// Interpolated center of obstacle `i` at absolute time `t`.
    pub fn position(&self, i: usize, t: f64) -> Vector2<f64> {
        let samples = &self.positions[i];
        let s = t / self.interval_dt - 0.5;
        if s <= 0.0 {
            return samples[0];
        }
        let k = s.floor() as usize;
        if k + 1 >= samples.len() {
            return *samples.last().expect("nonempty trace");
        }
        let frac = s - k as f64;
        samples[k] + (samples[k + 1] - samples[k]) * frac
    }
}

/// Goal logic for the episode drivers.
#[derive(Debug, Clone)]
pub enum DriverGoal {
    /// Travel `length` meters in +x, choosing among the given lane centers.
    Highway { length: f64, lanes: Vec<f64>, lookahead: f64 },
    /// Turn left across oncoming traffic: success once `x <= exit_x`.
    LeftTurn { exit: Vector2<f64>, exit_x: f64 },
}

/// A sampled trial: predicted fields for planning plus true traces for
/// collision checking.
pub struct TrafficEnv {
    pub obstacles: Vec<TrafficObstacle>,
    pub traces: TrueTraces,
    pub goal: DriverGoal,
}

impl FieldSource for TrafficEnv {
    fn field_at(&self, t_apply: f64, n_intervals: usize, interval_dt: f64) -> ObstacleField {
        build_obstacle_field(&self.obstacles, t_apply, n_intervals, interval_dt)
            .expect("scenario obstacles fit their lanes")
    }
}

impl Environment for TrafficEnv {
    fn obstacle_footprints(&self, t_abs: f64) -> Vec<Zonotope2> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| o.footprint(self.traces.position(i, t_abs)))
            .collect()
    }

    fn waypoint(&self, z: &VehicleState, t_abs: f64) -> Vector2<f64> {
        match &self.goal {
            DriverGoal::Highway { lanes, lookahead, .. } => {
                // Aim down the lane with the most free room ahead; ties
                // prefer staying in the current lane.
                let current = lanes
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        (a.1 - z.y).abs().partial_cmp(&(b.1 - z.y).abs()).expect("finite")
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let mut best = current;
                let mut best_room = f64::NEG_INFINITY;
                let ego_speed = z.u.max(5.0);
                for (idx, lane_y) in lanes.iter().enumerate() {
                    let mut room: f64 = *lookahead;
                    for o in self.obstacles.iter() {
                        let mean = o.mean_at(t_abs);
                        if (mean.y - lane_y).abs() < 0.5 * LANE_WIDTH {
                            let ahead = mean.x - z.x;
                            if ahead > -5.0 {
                                // Project the gap 4 s forward at the closing
                                // speed; receding traffic stops mattering.
                                let rel = o.speed - ego_speed;
                                room = room.min(ahead + (4.0 * rel).min(0.0));
                            }
                        }
                    }
                    let stay_bonus = if idx == current { 2.0 } else { 0.0 };
                    if room + stay_bonus > best_room {
                        best_room = room + stay_bonus;
                        best = idx;
                    }
                }
                Vector2::new(z.x + lookahead, lanes[best])
            }
            DriverGoal::LeftTurn { exit, .. } => *exit,
        }
    }

    fn reached_goal(&self, z: &VehicleState) -> bool {
        match &self.goal {
            DriverGoal::Highway { length, .. } => z.x >= *length,
            DriverGoal::LeftTurn { exit_x, .. } => z.x <= *exit_x,
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario generation
// ---------------------------------------------------------------------------

/// Desk-scale highway scenario knobs.
#[derive(Debug, Clone)]
pub struct HighwayConfig {
    pub length: f64,
    pub n_static: usize,
    pub n_dynamic: (usize, usize),
    pub speed_range: (f64, f64),
    pub ego_speed: f64,
    /// Obstacle footprint half-extents (length/2, width/2).
    pub obstacle_half: Vector2<f64>,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            length: 300.0,
            n_static: 1,
            n_dynamic: (3, 6),
            speed_range: (11.0, 16.5),
            ego_speed: 15.0,
            obstacle_half: Vector2::new(2.4, 1.0),
        }
    }
}

/// One generated scenario: obstacles plus ego initial state and goal.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub obstacles: Vec<TrafficObstacle>,
    pub ego: VehicleState,
    pub goal: DriverGoal,
    pub seed: u64,
    pub horizon: f64,
}

impl Scenario {
    /// Instantiate one trial of this scenario: sampled true obstacle motion
    /// against the scenario's densities.
    pub fn trial(&self, trial_seed: u64) -> TrafficEnv {
        TrafficEnv {
            obstacles: self.obstacles.clone(),
            traces: sample_true_trajectories(&self.obstacles, self.horizon, trial_seed),
            goal: self.goal.clone(),
        }
    }
}

/// Three straight lanes; the ego must cover `length` meters of dynamic
/// traffic. Dynamic obstacles spawn ahead with per-lane spacing.
pub fn generate_highway(seed: u64, cfg: &HighwayConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanes = vec![0.0, LANE_WIDTH, 2.0 * LANE_WIDTH];
    let ego_lane = 1usize;
    let mut obstacles = Vec::new();
    let n_dyn = rng.random_range(cfg.n_dynamic.0..=cfg.n_dynamic.1);
    let mut per_lane_x: Vec<Vec<f64>> = vec![Vec::new(); lanes.len()];
    let mut placed = 0usize;
    let mut guard = 0;
    while placed < n_dyn && guard < 1000 {
        guard += 1;
        let lane = rng.random_range(0..lanes.len());
        let x = rng.random_range(35.0..cfg.length - 20.0);
        if per_lane_x[lane].iter().any(|&e| (e - x).abs() < 30.0) {
            continue;
        }
        per_lane_x[lane].push(x);
        obstacles.push(TrafficObstacle {
            axis: Vector2::new(1.0, 0.0),
            start: Vector2::new(x, lanes[lane]),
            speed: rng.random_range(cfg.speed_range.0..cfg.speed_range.1),
            half: cfg.obstacle_half,
            is_static: false,
        });
        placed += 1;
    }
    let mut placed_static = 0usize;
    guard = 0;
    while placed_static < cfg.n_static && guard < 1000 {
        guard += 1;
        let lane = rng.random_range(0..lanes.len());
        // Far enough downstream that the first certified plan can still
        // commit to a lane change around it.
        let x = rng.random_range(160.0..cfg.length - 30.0);
        if per_lane_x[lane].iter().any(|&e| (e - x).abs() < 30.0) {
            continue;
        }
        per_lane_x[lane].push(x);
        obstacles.push(TrafficObstacle {
            axis: Vector2::new(1.0, 0.0),
            start: Vector2::new(x, lanes[lane]),
            speed: 0.0,
            half: cfg.obstacle_half,
            is_static: true,
        });
        placed_static += 1;
    }
    let params = VehicleParams::default();
    let ego = VehicleState::moving(0.0, lanes[ego_lane], 0.0, cfg.ego_speed, &params);
    Scenario {
        obstacles,
        ego,
        goal: DriverGoal::Highway { length: cfg.length, lanes, lookahead: 100.0 },
        seed,
        horizon: 90.0,
    }
}

/// Desk-scale unprotected-left-turn scenario knobs.
#[derive(Debug, Clone)]
pub struct LeftTurnConfig {
    pub n_static: (usize, usize),
    pub n_dynamic: (usize, usize),
    pub speed_range: (f64, f64),
    pub obstacle_half: Vector2<f64>,
}

impl Default for LeftTurnConfig {
    fn default() -> Self {
        Self {
            n_static: (4, 6),
            n_dynamic: (3, 4),
            speed_range: (12.0, 17.0),
            obstacle_half: Vector2::new(2.4, 1.0),
        }
    }
}

/// Four-way intersection: the ego waits northbound at the stop line and must
/// turn left (west) across two southbound lanes carrying through traffic.
/// Static obstacles occupy the horizontal street.
pub fn generate_left_turn(seed: u64, cfg: &LeftTurnConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles = Vec::new();
    // Southbound through traffic on the two oncoming vertical lanes.
    let n_dyn = rng.random_range(cfg.n_dynamic.0..=cfg.n_dynamic.1);
    let oncoming_lanes = [-0.5 * LANE_WIDTH, -1.5 * LANE_WIDTH];
    let mut per_lane_y: Vec<Vec<f64>> = vec![Vec::new(); 2];
    let mut placed = 0;
    let mut guard = 0;
    while placed < n_dyn && guard < 1000 {
        guard += 1;
        let lane = rng.random_range(0..2);
        let y = rng.random_range(15.0..150.0);
        if per_lane_y[lane].iter().any(|&e| (e - y).abs() < 32.0) {
            continue;
        }
        per_lane_y[lane].push(y);
        obstacles.push(TrafficObstacle {
            axis: Vector2::new(0.0, -1.0),
            start: Vector2::new(oncoming_lanes[lane], y),
            speed: rng.random_range(cfg.speed_range.0..cfg.speed_range.1),
            half: cfg.obstacle_half,
            is_static: false,
        });
        placed += 1;
    }
    // Parked vehicles on the horizontal street, clear of the turn path.
    let n_static = rng.random_range(cfg.n_static.0..=cfg.n_static.1);
    for k in 0..n_static {
        let east = k % 2 == 0;
        let x = if east {
            rng.random_range(14.0..45.0)
        } else {
            rng.random_range(-45.0..-25.0)
        };
        let y = if rng.random_bool(0.5) { 0.5 * LANE_WIDTH } else { -0.5 * LANE_WIDTH };
        obstacles.push(TrafficObstacle {
            axis: Vector2::new(1.0, 0.0),
            start: Vector2::new(x, y),
            speed: 0.0,
            half: cfg.obstacle_half,
            is_static: true,
        });
    }
    let ego = VehicleState::at_rest(0.5 * LANE_WIDTH, -13.0, std::f64::consts::FRAC_PI_2);
    Scenario {
        obstacles,
        ego,
        goal: DriverGoal::LeftTurn { exit: Vector2::new(-28.0, 0.5 * LANE_WIDTH), exit_x: -6.5 },
        seed,
        horizon: 75.0,
    }
}

// ---------------------------------------------------------------------------
// Tube libraries
// ---------------------------------------------------------------------------

fn lateral_gain(u: f64, t_m: f64) -> f64 {
    // Small-angle lateral displacement of the lane-change profile per unit
    // of the yaw parameter: u * t_m^2 / (2 pi).
    u * t_m * t_m / (2.0 * std::f64::consts::PI)
}

/// Build the highway tube library: per 2 m/s speed cell, narrow speed bins
/// plus one lane-width lateral bin per direction and a small heading bin.
/// Narrow parameter bins keep the Hessian-supremum hull tight.
pub fn build_highway_library(params: &VehicleParams) -> Result<TubeLibrary, ScenarioError> {
    let cfg = BuildConfig::default();
    // Speed-bin targets stay inside the union of cells so every handoff
    // speed lands in some cell; the floor allows creeping behind slow
    // traffic, the cap bounds horizon length.
    let speed_floor = 5.0;
    let speed_cap = 17.0;
    let mut tubes = Vec::new();
    for mid in [6.0, 8.0, 10.0, 12.0, 14.0, 16.0] {
        let cell = VelocityCell { u: (mid - 1.0, mid + 1.0), v: (-0.6, 0.6), r: (-0.25, 0.25) };
        let mut lo = speed_floor;
        while lo + 1.0 <= speed_cap + 1e-9 {
            let hi = lo + 1.0;
            // Only bins reachable from this cell within one blend.
            if lo >= mid - 2.0 && hi <= mid + 2.0 {
                tubes.push(build_tube(
                    FamilyKind::SpeedChange,
                    cell,
                    ParamBox::new(Vector2::new(lo, 0.0), Vector2::new(hi, 0.0)),
                    params,
                    &cfg,
                )?);
            }
            lo += 1.0;
        }
        // Lateral bins sized for one lane of displacement, at cruise and at a
        // reduced speed (the displacement scales with speed, so each speed
        // bin gets its own yaw magnitude).
        if mid >= 10.0 {
            for (su_lo, su_hi) in [(mid - 0.5, mid + 0.5), (mid - 1.5, mid - 0.5)] {
                let su_mid = 0.5 * (su_lo + su_hi);
                let py = LANE_WIDTH / lateral_gain(su_mid, FamilyKind::LaneChange.t_m());
                for sign in [1.0, -1.0] {
                    let center = sign * py;
                    tubes.push(build_tube(
                        FamilyKind::LaneChange,
                        cell,
                        ParamBox::new(
                            Vector2::new(su_lo, center - 0.006),
                            Vector2::new(su_hi, center + 0.006),
                        ),
                        params,
                        &cfg,
                    )?);
                }
            }
        }
    }
    Ok(TubeLibrary::new(tubes))
}

/// Left-turn library: launch-from-rest turn bins plus low-speed exit bins.
pub fn build_left_turn_library(params: &VehicleParams) -> Result<TubeLibrary, ScenarioError> {
    let cfg = BuildConfig::default();
    let mut tubes = Vec::new();
    let rest = VelocityCell { u: (0.0, 0.0), v: (0.0, 0.0), r: (0.0, 0.0) };
    let quarter_turn = std::f64::consts::FRAC_PI_6;
    for (lo, hi) in [(3.0, 4.0), (5.0, 6.0), (7.0, 8.0)] {
        tubes.push(build_tube(
            FamilyKind::LeftTurn,
            rest,
            ParamBox::new(
                Vector2::new(lo, quarter_turn - 0.015),
                Vector2::new(hi, quarter_turn + 0.015),
            ),
            params,
            &cfg,
        )?);
    }
    // Exit continuation at low speed.
    for mid in [4.0, 6.0, 8.0] {
        let cell = VelocityCell { u: (mid - 1.0, mid + 1.0), v: (-0.6, 0.6), r: (-0.3, 0.3) };
        tubes.push(build_tube(
            FamilyKind::SpeedChange,
            cell,
            ParamBox::new(Vector2::new(mid - 0.5, 0.0), Vector2::new(mid + 0.5, 0.0)),
            params,
            &cfg,
        )?);
    }
    Ok(TubeLibrary::new(tubes))
}

static HIGHWAY_LIB: OnceLock<TubeLibrary> = OnceLock::new();
static LEFT_TURN_LIB: OnceLock<TubeLibrary> = OnceLock::new();

/// Process-wide default libraries (built once, default vehicle parameters).
pub fn highway_library() -> &'static TubeLibrary {
    HIGHWAY_LIB.get_or_init(|| {
        build_highway_library(&VehicleParams::default()).expect("default highway tubes build")
    })
}

pub fn left_turn_library() -> &'static TubeLibrary {
    LEFT_TURN_LIB.get_or_init(|| {
        build_left_turn_library(&VehicleParams::default()).expect("default left-turn tubes build")
    })
}

// ---------------------------------------------------------------------------
// Tightness benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PdfKind {
    Gaussian,
    Beta,
    Multimodal,
}

impl PdfKind {
    pub const ALL: [PdfKind; 3] = [PdfKind::Gaussian, PdfKind::Beta, PdfKind::Multimodal];

    pub fn label(&self) -> &'static str {
        match self {
            PdfKind::Gaussian => "gaussian",
            PdfKind::Beta => "beta",
            PdfKind::Multimodal => "multimodal",
        }
    }
}

/// One randomized tightness case: a reach-like zonotope with a small
/// parameter map, an obstacle generator box, and a density placed at a
/// varied distance.
pub struct TightnessCase {
    pub tube: WorldTube,
    pub field: ObstacleField,
    pub p: DVector<f64>,
}

pub fn random_tightness_case(kind: PdfKind, seed: u64) -> TightnessCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Footprint-like zonotope: rotated box plus a few small generators.
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let r = rot(theta);
    let mut generators = vec![
        r * Vector2::new(rng.random_range(1.8..3.2), 0.0),
        r * Vector2::new(0.0, rng.random_range(0.8..1.4)),
    ];
    for _ in 0..rng.random_range(1..3) {
        generators.push(Vector2::new(
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ));
    }
    let a = Matrix2xX::from_row_slice(&[
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
    ]);
    let tube = WorldTube {
        family: FamilyKind::LaneChange,
        p_box: ParamBox::new(Vector2::new(-1.0, -1.0), Vector2::new(1.0, 1.0)),
        dt: INTERVAL_DT,
        t_m: 6.0,
        t_f: 10.5,
        intervals: vec![WorldInterval { center: Vector2::zeros(), a, generators }],
    };
    let gobs = vec![
        Vector2::new(rng.random_range(1.5..2.6), 0.0),
        Vector2::new(0.0, rng.random_range(0.8..1.2)),
    ];

    // Density center at a varied distance so cases sweep the full risk range.
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let dist = rng.random_range(0.0..10.0);
    let at = Vector2::new(dist * dir.cos(), dist * dir.sin());
    let model = match kind {
        PdfKind::Gaussian => PdfModel::Gaussian(random_gaussian_at(at, &mut rng, 1.2, 2.4)),
        PdfKind::Multimodal => {
            let n = rng.random_range(2..4);
            let comps: Vec<Gaussian> = (0..n)
                .map(|_| {
                    let off = Vector2::new(rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5));
                    random_gaussian_at(at + off, &mut rng, 1.0, 2.0)
                })
                .collect();
            let weights = vec![1.0; comps.len()];
            PdfModel::GaussianMixture(Mixture::new(weights, comps).expect("valid mixture"))
        }
        PdfKind::Beta => {
            let ext = Vector2::new(rng.random_range(9.0..13.0), rng.random_range(9.0..13.0));
            let shapes = [
                rng.random_range(3.2..5.0),
                rng.random_range(3.2..5.0),
                rng.random_range(3.2..5.0),
                rng.random_range(3.2..5.0),
            ];
            PdfModel::BivariateBeta(
                BivariateBeta::new(shapes, rng.random_range(-0.3..0.3), at - 0.5 * ext, at + 0.5 * ext)
                    .expect("valid beta"),
            )
        }
    };
    let field = ObstacleField::new(vec![vec![model]], gobs).expect("rectangular");
    let p = DVector::from_column_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    TightnessCase { tube, field, p }
}

fn random_gaussian_at(mean: Vector2<f64>, rng: &mut ChaCha8Rng, s_lo: f64, s_hi: f64) -> Gaussian {
    let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let r = rot(ang);
    let d = Matrix2::new(
        rng.random_range(s_lo..s_hi).powi(2),
        0.0,
        0.0,
        rng.random_range(s_lo..s_hi).powi(2),
    );
    Gaussian::new(mean, r * d * r.transpose()).expect("SPD")
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessRow {
    pub case_id: usize,
    pub kind: &'static str,
    pub closed_form: f64,
    pub lower_variant: f64,
    pub mc_value: f64,
    pub mc_std_error: f64,
    pub cantelli: f64,
    pub negative_terms: usize,
    pub closed_wall: f64,
    pub mc_wall: f64,
    pub cantelli_wall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessSummary {
    pub kind: &'static str,
    pub cases: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub cantelli_mean_error: f64,
    pub cantelli_max_error: f64,
    pub conservatism_violations: usize,
    pub cantelli_violations: usize,
    pub negative_term_cases: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    pub summaries: Vec<TightnessSummary>,
}

/// Random-case comparison of the closed form against Monte-Carlo ground
/// truth and the moment bound.
pub fn run_tightness_benchmark(
    n_cases: usize,
    kinds: &[PdfKind],
    grid_k: usize,
    mc_samples: usize,
    seed: u64,
) -> TightnessReport {
    let mut rows: Vec<TightnessRow> = Vec::new();
    for kind in kinds {
        let kind_rows: Vec<TightnessRow> = (0..n_cases)
            .into_par_iter()
            .map(|case| {
                let case_seed = seed
                    ^ (case as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (kind_tag(*kind)).wrapping_mul(0xD1B5_4A32_D192_ED03);
                let tc = random_tightness_case(*kind, case_seed);
                let t0 = std::time::Instant::now();
                let report = risk_and_grad(&tc.tube, &tc.field, &tc.p, grid_k)
                    .expect("finite density");
                let closed_wall = t0.elapsed().as_secs_f64();

                let mut region = tc.tube.zonotope_at(0, &tc.p);
                region.generators.extend_from_slice(&tc.field.obstacle_generators);
                let model = tc.field.pdf(0, 0);
                let t1 = std::time::Instant::now();
                let mc = mc_risk(&region, model, mc_samples, case_seed ^ 0xC0FFEE);
                let mc_wall = t1.elapsed().as_secs_f64();

                let t2 = std::time::Instant::now();
                let cant = cantelli_risk(&region, model.mean(), model.cov())
                    .expect("nonsingular moments");
                let cantelli_wall = t2.elapsed().as_secs_f64();

                TightnessRow {
                    case_id: case,
                    kind: kind.label(),
                    closed_form: report.total,
                    lower_variant: report.total_lower,
                    mc_value: mc.value,
                    mc_std_error: mc.std_error,
                    cantelli: cant,
                    negative_terms: report.negative_terms,
                    closed_wall,
                    mc_wall,
                    cantelli_wall,
                }
            })
            .collect();
        rows.extend(kind_rows);
    }

    let summaries = kinds
        .iter()
        .map(|kind| {
            let sel: Vec<&TightnessRow> =
                rows.iter().filter(|r| r.kind == kind.label()).collect();
            let n = sel.len().max(1) as f64;
            let errs: Vec<f64> = sel.iter().map(|r| r.closed_form - r.mc_value).collect();
            let cant_errs: Vec<f64> = sel.iter().map(|r| r.cantelli - r.mc_value).collect();
            TightnessSummary {
                kind: kind.label(),
                cases: sel.len(),
                mean_error: errs.iter().sum::<f64>() / n,
                max_error: errs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                cantelli_mean_error: cant_errs.iter().sum::<f64>() / n,
                cantelli_max_error: cant_errs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                conservatism_violations: sel
                    .iter()
                    .filter(|r| r.closed_form < r.mc_value - 3.0 * r.mc_std_error)
                    .count(),
                cantelli_violations: sel
                    .iter()
                    .filter(|r| r.cantelli < r.mc_value - 3.0 * r.mc_std_error)
                    .count(),
                negative_term_cases: sel.iter().filter(|r| r.negative_terms > 0).count(),
            }
        })
        .collect();
    TightnessReport { rows, summaries }
}

fn kind_tag(kind: PdfKind) -> u64 {
    match kind {
        PdfKind::Gaussian => 1,
        PdfKind::Beta => 2,
        PdfKind::Multimodal => 3,
    }
}

// ---------------------------------------------------------------------------
// Episode audits and suites
// ---------------------------------------------------------------------------

/// Monte-Carlo audit of every certified plan an episode executed: per plan,
/// the summed per-pair membership probabilities under the same fields the
/// planner saw.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateAudit {
    pub certified: f64,
    pub mc_total: f64,
    pub mc_std_error: f64,
}

pub fn audit_episode(
    log: &EpisodeLog,
    env: &TrafficEnv,
    library: &TubeLibrary,
    samples_per_pair: usize,
) -> Vec<CertificateAudit> {
    log.executed_plans
        .par_iter()
        .map(|plan| {
            let tube = &library.tubes[plan.tube_index];
            let world = crate::reach::tube_to_world(tube, &plan.z0).expect("plan was solvable");
            let field = env.field_at(plan.t_apply, tube.n_intervals(), tube.dt);
            let p = DVector::from_column_slice(&plan.p);
            let mut total = 0.0;
            let mut var = 0.0;
            for j in 0..world.n_intervals() {
                let mut region = world.zonotope_at(j, &p);
                region.generators.extend_from_slice(&field.obstacle_generators);
                let (blo, bhi) = region.bounding_box();
                let query = crate::interval::Box2::new(blo, bhi);
                for i in 0..field.n_obstacles() {
                    let model = field.pdf(i, j);
                    if model.mass_negligible_in(&query) {
                        continue;
                    }
                    let est = mc_risk(
                        &region,
                        model,
                        samples_per_pair,
                        plan.t_apply.to_bits() ^ (i as u64) << 32 ^ j as u64,
                    );
                    total += est.value;
                    var += est.std_error * est.std_error;
                }
            }
            CertificateAudit {
                certified: plan.certified_risk,
                mc_total: total,
                mc_std_error: var.sqrt(),
            }
        })
        .collect()
}

/// Outcome counts for a batch of episodes.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OutcomeCounts {
    pub success: usize,
    pub crash: usize,
    pub safe_stop: usize,
    pub other: usize,
    /// Safe stops that never left the start (subset of `safe_stop`).
    pub never_started: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, log: &EpisodeLog) {
        match log.end {
            EpisodeEnd::Success => self.success += 1,
            EpisodeEnd::Crash => self.crash += 1,
            EpisodeEnd::SafeStop => {
                self.safe_stop += 1;
                if log.distance_traveled < 1.0 {
                    self.never_started += 1;
                }
            }
            EpisodeEnd::Other => self.other += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.success + self.crash + self.safe_stop + self.other
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub outcomes: OutcomeCounts,
    pub avg_time_to_goal: f64,
    pub max_time_to_goal: f64,
    pub audit_violations: usize,
    pub max_certified_risk: f64,
    pub solve_wall_mean: f64,
    pub solve_wall_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Matched-seed left-turn episodes across risk thresholds.
pub fn run_left_turn_sweep(
    epsilons: &[f64],
    n_scenarios: usize,
    seed: u64,
    audit_samples: usize,
) -> Result<SweepReport, ScenarioError> {
    let params = VehicleParams::default();
    let library = left_turn_library();
    let cfg_base = EpisodeConfig {
        t_plan: 3.0,
        grid_k: 24,
        max_time: 45.0,
        wait_at_start: true,
        families: vec![FamilyKind::LeftTurn],
        deterministic: false,
        // Results stay load-independent; wall times are still recorded.
        wall_budget: None,
        ..EpisodeConfig::default()
    };
    let scenario_cfg = LeftTurnConfig::default();

    let mut rows = Vec::new();
    for &eps in epsilons {
        let episodes: Vec<(EpisodeLog, usize)> = (0..n_scenarios)
            .into_par_iter()
            .map(|s| {
                let scenario = generate_left_turn(seed ^ (s as u64) << 8, &scenario_cfg);
                // Matched truth across epsilons: trial seed independent of eps.
                let env = scenario.trial(seed ^ 0xABCD ^ (s as u64) << 16);
                let cfg = EpisodeConfig { epsilon: eps, ..cfg_base.clone() };
                let log = run_receding_horizon(&scenario.ego, &env, library, &params, &cfg)
                    .expect("episode runs");
                let violations = audit_episode(&log, &env, library, audit_samples)
                    .iter()
                    .filter(|a| a.certified < a.mc_total - 3.0 * a.mc_std_error)
                    .count();
                (log, violations)
            })
            .collect();

        let mut outcomes = OutcomeCounts::default();
        let mut ttgs = Vec::new();
        let mut audit_violations = 0;
        let mut max_risk: f64 = 0.0;
        let mut walls = Vec::new();
        for (log, v) in &episodes {
            outcomes.add(log);
            if let Some(t) = log.time_to_goal {
                ttgs.push(t);
            }
            audit_violations += v;
            max_risk = max_risk.max(log.max_certified_risk);
            walls.extend(log.iterations.iter().map(|it| it.outcome.wall_time));
        }
        let n_ttg = ttgs.len().max(1) as f64;
        rows.push(SweepRow {
            epsilon: eps,
            outcomes,
            avg_time_to_goal: ttgs.iter().sum::<f64>() / n_ttg,
            max_time_to_goal: ttgs.iter().copied().fold(0.0, f64::max),
            audit_violations,
            max_certified_risk: max_risk,
            solve_wall_mean: walls.iter().sum::<f64>() / walls.len().max(1) as f64,
            solve_wall_max: walls.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(SweepReport { rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct HighwayRow {
    pub mode: &'static str,
    pub epsilon: f64,
    pub outcomes: OutcomeCounts,
    pub audit_violations: usize,
    pub solve_wall_mean: f64,
    pub solve_wall_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HighwayReport {
    pub rows: Vec<HighwayRow>,
}

/// Matched-seed highway episodes in stochastic and deterministic (5-sigma
/// avoidance) modes.
pub fn run_highway_suite(
    n_scenarios: usize,
    trials: usize,
    epsilon: f64,
    seed: u64,
    audit_samples: usize,
) -> Result<HighwayReport, ScenarioError> {
    let params = VehicleParams::default();
    let library = highway_library();
    let scenario_cfg = HighwayConfig::default();
    let cfg_base = EpisodeConfig {
        epsilon,
        t_plan: 3.0,
        grid_k: 24,
        max_time: scenario_cfg.length / 8.0 + 15.0,
        wait_at_start: false,
        families: vec![FamilyKind::LaneChange, FamilyKind::SpeedChange],
        deterministic: false,
        wall_budget: None,
        ..EpisodeConfig::default()
    };

    let mut rows = Vec::new();
    for deterministic in [false, true] {
        let episodes: Vec<(EpisodeLog, usize)> = (0..n_scenarios * trials)
            .into_par_iter()
            .map(|idx| {
                let s = idx / trials;
                let trial = idx % trials;
                let scenario = generate_highway(seed ^ (s as u64) << 8, &scenario_cfg);
                let env = scenario.trial(seed ^ 0xFACE ^ (idx as u64) << 16);
                let cfg = EpisodeConfig { deterministic, ..cfg_base.clone() };
                let log = run_receding_horizon(&scenario.ego, &env, library, &params, &cfg)
                    .expect("episode runs");
                let violations = if deterministic {
                    0
                } else {
                    audit_episode(&log, &env, library, audit_samples)
                        .iter()
                        .filter(|a| a.certified < a.mc_total - 3.0 * a.mc_std_error)
                        .count()
                };
                let _ = trial;
                (log, violations)
            })
            .collect();

        let mut outcomes = OutcomeCounts::default();
        let mut audit_violations = 0;
        let mut walls = Vec::new();
        for (log, v) in &episodes {
            outcomes.add(log);
            audit_violations += v;
            walls.extend(log.iterations.iter().map(|it| it.outcome.wall_time));
        }
        rows.push(HighwayRow {
            mode: if deterministic { "deterministic_5sigma" } else { "stochastic" },
            epsilon,
            outcomes,
            audit_violations,
            solve_wall_mean: walls.iter().sum::<f64>() / walls.len().max(1) as f64,
            solve_wall_max: walls.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(HighwayReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_obstacle(speed: f64, is_static: bool) -> TrafficObstacle {
        TrafficObstacle {
            axis: Vector2::new(1.0, 0.0),
            start: Vector2::new(40.0, LANE_WIDTH),
            speed,
            half: Vector2::new(2.4, 1.0),
            is_static,
        }
    }

    #[test]
    fn lateral_sigma_from_lane_slack() {
        // W = 2 m in a 3.7 m lane: 6 sigma_lat spans 1.7 m.
        let o = sample_obstacle(10.0, false);
        let cov = o.cov();
        assert_relative_eq!(cov[(1, 1)].sqrt(), (LANE_WIDTH - 2.0) / 6.0, epsilon = 1e-12);
        // Longitudinal: L + u dt over 6.
        assert_relative_eq!(cov[(0, 0)].sqrt(), (4.8 + 10.0 * INTERVAL_DT) / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn static_longitudinal_sigma_is_footprint_only() {
        let o = sample_obstacle(0.0, true);
        assert_relative_eq!(o.cov()[(0, 0)].sqrt(), 4.8 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn vertical_lane_swaps_axes() {
        let o = TrafficObstacle {
            axis: Vector2::new(0.0, -1.0),
            start: Vector2::new(-1.85, 30.0),
            speed: 14.0,
            half: Vector2::new(2.4, 1.0),
            is_static: false,
        };
        let cov = o.cov();
        // Longitudinal variance now sits on the y axis.
        assert!(cov[(1, 1)] > cov[(0, 0)]);
        assert_relative_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sampled_centers_stay_in_lane() {
        let o = sample_obstacle(12.0, false);
        let pdf = o.pdf_at(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut inside = 0usize;
        for _ in 0..n {
            let w = pdf.sample(&mut rng);
            if (w.y - LANE_WIDTH).abs() <= 0.5 * (LANE_WIDTH - 2.0) {
                inside += 1;
            }
        }
        // Lateral 3-sigma coverage.
        assert!(inside as f64 / n as f64 >= 0.997, "{}", inside as f64 / n as f64);
    }

    #[test]
    fn true_traces_deterministic_and_static_constant() {
        let obstacles = vec![sample_obstacle(12.0, false), sample_obstacle(0.0, true)];
        let a = sample_true_trajectories(&obstacles, 20.0, 7);
        let b = sample_true_trajectories(&obstacles, 20.0, 7);
        assert_eq!(a.positions, b.positions);
        let statics = &a.positions[1];
        assert!(statics.iter().all(|p| p == &statics[0]));
        // Dynamic interval means advance at constant speed.
        let mean_gap: f64 = a.positions[0]
            .windows(2)
            .map(|w| w[1].x - w[0].x)
            .sum::<f64>()
            / (a.positions[0].len() - 1) as f64;
        assert_relative_eq!(mean_gap, 12.0 * INTERVAL_DT, epsilon = 1.0);
    }

    #[test]
    fn per_interval_draws_follow_density() {
        let o = sample_obstacle(13.0, false);
        let trials = 2000;
        let j = 4;
        let t_mid = (j as f64 + 0.5) * INTERVAL_DT;
        let pdf = o.pdf_at(t_mid);
        let mut acc = Vector2::zeros();
        for t in 0..trials {
            let traces = sample_true_trajectories(std::slice::from_ref(&o), 10.0, 1000 + t);
            acc += traces.positions[0][j];
        }
        let emp = acc / trials as f64;
        let se = (pdf.cov().trace() / trials as f64).sqrt();
        assert!((emp - pdf.mean()).norm() <= 4.0 * se, "empirical {emp:?}");
    }

    #[test]
    fn field_shape_and_width_guard() {
        let obstacles = vec![sample_obstacle(10.0, false)];
        let field = build_obstacle_field(&obstacles, 1.5, 15, INTERVAL_DT).unwrap();
        assert_eq!(field.n_obstacles(), 1);
        assert_eq!(field.n_intervals(), 15);
        let wide = vec![TrafficObstacle { half: Vector2::new(2.4, 1.9), ..sample_obstacle(0.0, true) }];
        assert!(matches!(
            build_obstacle_field(&wide, 0.0, 4, INTERVAL_DT),
            Err(ScenarioError::ObstacleTooWide(_))
        ));
    }

    #[test]
    fn scenario_generation_is_deterministic() {
        let cfg = HighwayConfig::default();
        let a = generate_highway(42, &cfg);
        let b = generate_highway(42, &cfg);
        assert_eq!(a.obstacles.len(), b.obstacles.len());
        for (x, y) in a.obstacles.iter().zip(&b.obstacles) {
            assert_eq!(x.start, y.start);
            assert_eq!(x.speed, y.speed);
        }
        let lt = generate_left_turn(7, &LeftTurnConfig::default());
        assert!(lt.obstacles.iter().any(|o| !o.is_static));
        assert!(lt.obstacles.iter().any(|o| o.is_static));
        // Oncoming traffic on the left of the ego's approach lane.
        for o in lt.obstacles.iter().filter(|o| !o.is_static) {
            assert!(o.start.x < 0.0);
            assert_eq!(o.axis, Vector2::new(0.0, -1.0));
        }
    }

    #[test]
    fn tightness_case_generation_spans_risk_range() {
        let mut low = 0;
        let mut high = 0;
        for c in 0..40 {
            let tc = random_tightness_case(PdfKind::Gaussian, 100 + c);
            let mut region = tc.tube.zonotope_at(0, &tc.p);
            region.generators.extend_from_slice(&tc.field.obstacle_generators);
            let mc = mc_risk(&region, tc.field.pdf(0, 0), 20_000, c);
            if mc.value < 0.05 {
                low += 1;
            }
            if mc.value > 0.5 {
                high += 1;
            }
        }
        assert!(low > 0 && high > 0, "low {low} high {high}");
    }
}
