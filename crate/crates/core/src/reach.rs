//! Control-parameterized zonotope reach tubes.
//!
//! A tube stores, per planning interval, a zonotope family
//! `<c_j + A_j p, G_j>` in the body frame of the planning instant, built by
//! sampling the closed-loop hybrid dynamics over an initial-velocity cell and
//! the parameter box, fitting the interval centers affinely in p, and
//! inflating the generators by the fit residual plus a bloat margin. The
//! construction is validated empirically on held-out samples; there is no
//! formal reachability guarantee.

use crate::vehicle::{
    self, DesiredTrajectory, Disturbance, DynamicsError, FamilyKind, VehicleParams, VehicleState,
};
use crate::zonotope::{rot, Zonotope2};
use nalgebra::{DMatrix, DVector, Matrix2xX, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TubeError {
    #[error("initial state lies outside the tube's velocity cell")]
    OutsideCell,
    #[error("tube validation failed: containment fraction {0}, worst escape {1} m")]
    ValidationFailed(f64, f64),
    #[error("simulation failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("tube io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tube decode: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("unsupported tube file version {0}")]
    Version(u32),
}

/// Box of initial body-frame velocities (u, v, r) a tube is valid for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityCell {
    pub u: (f64, f64),
    pub v: (f64, f64),
    pub r: (f64, f64),
}

impl VelocityCell {
    pub fn contains(&self, state: &VehicleState) -> bool {
        // Guard-kink integration error leaves handoff speeds within ~1e-7 of
        // the commanded bin edge; the generator bloat dwarfs this slack.
        let tol = 5e-3;
        state.u >= self.u.0 - tol
            && state.u <= self.u.1 + tol
            && state.v >= self.v.0 - tol
            && state.v <= self.v.1 + tol
            && state.r >= self.r.0 - tol
            && state.r <= self.r.1 + tol
    }
}

/// Trajectory-parameter box P.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

impl ParamBox {
    pub fn new(lo: Vector2<f64>, hi: Vector2<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn center(&self) -> Vector2<f64> {
        0.5 * (self.lo + self.hi)
    }

    pub fn clamp(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x.clamp(self.lo.x, self.hi.x), p.y.clamp(self.lo.y, self.hi.y))
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= self.lo.x - 1e-12
            && p.x <= self.hi.x + 1e-12
            && p.y >= self.lo.y - 1e-12
            && p.y <= self.hi.y + 1e-12
    }

    pub fn corners(&self) -> [Vector2<f64>; 4] {
        [
            self.lo,
            Vector2::new(self.hi.x, self.lo.y),
            Vector2::new(self.lo.x, self.hi.y),
            self.hi,
        ]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vector2<f64> {
        Vector2::new(
            rng.random_range(self.lo.x..=self.hi.x),
            rng.random_range(self.lo.y..=self.hi.y),
        )
    }

    fn grid(&self, n: usize) -> Vec<Vector2<f64>> {
        let lin = |lo: f64, hi: f64, i: usize| {
            if n == 1 || hi == lo {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut out: Vec<Vector2<f64>> = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let cand =
                    Vector2::new(lin(self.lo.x, self.hi.x, ix), lin(self.lo.y, self.hi.y, iy));
                if !out.contains(&cand) {
                    out.push(cand);
                }
            }
        }
        out
    }
}

/// One planning interval of a body-frame tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeInterval {
    /// Center at p = 0.
    pub center: Vector2<f64>,
    /// Sensitivity of the center to the trajectory parameter (2 x n_p).
    pub a: Matrix2xX<f64>,
    /// Axis-aligned generator half-widths.
    pub half_widths: Vector2<f64>,
}

/// Body-frame reach tube for one (family, velocity cell) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachTube {
    pub family: FamilyKind,
    pub cell: VelocityCell,
    pub p_box: ParamBox,
    /// Planning-interval width [s].
    pub dt: f64,
    pub t_m: f64,
    pub t_f: f64,
    pub intervals: Vec<TubeInterval>,
    /// Largest per-axis center-fit residual observed during construction.
    pub fit_residual: Vector2<f64>,
}

/// Serialized tube file.
#[derive(Serialize, Deserialize)]
struct TubeFile {
    version: u32,
    tube: ReachTube,
}

const TUBE_FILE_VERSION: u32 = 1;

impl ReachTube {
    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    /// Body-frame zonotope for interval j at parameter p.
    pub fn zonotope_at(&self, j: usize, p: Vector2<f64>) -> Zonotope2 {
        let iv = &self.intervals[j];
        let shift = &iv.a * DVector::from_column_slice(&[p.x, p.y]);
        Zonotope2::aabb(iv.center + Vector2::new(shift[0], shift[1]), iv.half_widths)
    }

    pub fn save(&self, path: &Path) -> Result<(), TubeError> {
        let file = TubeFile { version: TUBE_FILE_VERSION, tube: self.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReachTube, TubeError> {
        let file: TubeFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != TUBE_FILE_VERSION {
            return Err(TubeError::Version(file.version));
        }
        Ok(file.tube)
    }

    /// Copy with generators shrunk by `factor`; negative-control helper for
    /// the validator.
    pub fn deflated(&self, factor: f64) -> ReachTube {
        let mut out = self.clone();
        for iv in &mut out.intervals {
            iv.half_widths *= factor;
        }
        out
    }
}

/// World-frame view of a tube for a concrete planning state.
#[derive(Debug, Clone)]
pub struct WorldTube {
    pub family: FamilyKind,
    pub p_box: ParamBox,
    pub dt: f64,
    pub t_m: f64,
    pub t_f: f64,
    pub intervals: Vec<WorldInterval>,
}

#[derive(Debug, Clone)]
pub struct WorldInterval {
    pub center: Vector2<f64>,
    pub a: Matrix2xX<f64>,
    pub generators: Vec<Vector2<f64>>,
}

impl WorldTube {
    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    /// Reach zonotope of interval j at parameter p.
    pub fn zonotope_at(&self, j: usize, p: &DVector<f64>) -> Zonotope2 {
        let iv = &self.intervals[j];
        let shift = &iv.a * p;
        Zonotope2::new(iv.center + Vector2::new(shift[0], shift[1]), iv.generators.clone())
    }

    /// Zonotope at p = 0 buffered by the obstacle generators: the set the
    /// triangle cover is built over.
    pub fn buffered_zero(&self, j: usize, obstacle_generators: &[Vector2<f64>]) -> Zonotope2 {
        let iv = &self.intervals[j];
        let mut gens = iv.generators.clone();
        gens.extend_from_slice(obstacle_generators);
        Zonotope2::new(iv.center, gens)
    }
}

/// Transform a body-frame tube into the world frame of `z0`:
/// `c_j -> rot(h0) c_j + (x0, y0)`, `A_j -> rot(h0) A_j`,
/// `G_j -> rot(h0) G_j`. Fails if `z0`'s velocities leave the cell.
pub fn tube_to_world(tube: &ReachTube, z0: &VehicleState) -> Result<WorldTube, TubeError> {
    if !tube.cell.contains(z0) {
        return Err(TubeError::OutsideCell);
    }
    let r = rot(z0.h);
    let xy = z0.position();
    let intervals = tube
        .intervals
        .iter()
        .map(|iv| WorldInterval {
            center: r * iv.center + xy,
            a: &r * &iv.a,
            generators: vec![
                r * Vector2::new(iv.half_widths.x, 0.0),
                r * Vector2::new(0.0, iv.half_widths.y),
            ],
        })
        .collect();
    Ok(WorldTube {
        family: tube.family,
        p_box: tube.p_box.clone(),
        dt: tube.dt,
        t_m: tube.t_m,
        t_f: tube.t_f,
        intervals,
    })
}

/// Tube construction knobs.
#[derive(Debug, Clone)]
pub struct BuildConfig {
    /// Integrator step [s].
    pub sim_dt: f64,
    /// Planning-interval width [s].
    pub interval_dt: f64,
    /// Parameter grid resolution per dimension.
    pub p_grid: usize,
    /// Velocity samples per cell axis (u, v, r).
    pub vel_samples: (usize, usize, usize),
    /// Footprint sub-samples per interval.
    pub sub_samples: usize,
    /// Additive generator margin [m].
    pub bloat: f64,
    /// Residual multiplier added to the margin.
    pub residual_factor: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            sim_dt: 1e-3,
            interval_dt: 0.5,
            p_grid: 5,
            vel_samples: (3, 3, 3),
            sub_samples: 10,
            bloat: 0.15,
            residual_factor: 3.0,
        }
    }
}

fn lin_samples(range: (f64, f64), n: usize) -> Vec<f64> {
    if n <= 1 || range.1 == range.0 {
        return vec![0.5 * (range.0 + range.1)];
    }
    (0..n).map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64).collect()
}

/// Swept footprint corner cloud per interval for one simulated trajectory.
fn sweep_corners(
    family: FamilyKind,
    p: Vector2<f64>,
    vel: (f64, f64, f64),
    params: &VehicleParams,
    cfg: &BuildConfig,
    n_intervals: usize,
) -> Result<Vec<Vec<Vector2<f64>>>, DynamicsError> {
    let traj = DesiredTrajectory::new(family, vel.0);
    let mut z0 = VehicleState::moving(0.0, 0.0, 0.0, vel.0, params);
    z0.v = vel.1;
    z0.r = vel.2;
    let trace = vehicle::simulate(&traj, p, &z0, params, cfg.sim_dt, &Disturbance::Zero)?;
    let mut per_interval = vec![Vec::new(); n_intervals];
    let stride = (cfg.interval_dt / cfg.sim_dt / cfg.sub_samples as f64).round().max(1.0) as usize;
    for (idx, s) in trace.iter().enumerate() {
        if idx % stride != 0 && idx + 1 != trace.len() {
            continue;
        }
        let corners = vehicle::footprint_at(s, params).vertices();
        // The intervals are closed and share endpoints: a state exactly on a
        // boundary belongs to both adjacent intervals.
        let ratio = s.t / cfg.interval_dt;
        let j_hi = (ratio.floor() as usize).min(n_intervals - 1);
        let on_boundary = (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0;
        per_interval[j_hi].extend_from_slice(&corners);
        if on_boundary {
            let j_lo = (ratio.round() as usize - 1).min(n_intervals - 1);
            if j_lo != j_hi {
                per_interval[j_lo].extend_from_slice(&corners);
            }
        }
    }
    Ok(per_interval)
}

/// Build a reach tube by sampling, affine center fitting and inflation.
///
/// The returned tube has already passed a fresh-sample validation; failure to
/// reach full containment is an error carrying the observed fraction.
pub fn build_tube(
    family: FamilyKind,
    cell: VelocityCell,
    p_box: ParamBox,
    params: &VehicleParams,
    cfg: &BuildConfig,
) -> Result<ReachTube, TubeError> {
    let mut tube = fit_tube(family, cell, p_box, params, cfg)?;
    // Margin calibration: the affine fit and grid hull can miss interior
    // (velocity, parameter) combinations by a few centimeters. Probe with
    // random interior samples and absorb twice the worst observed escape
    // into the generators, then gate on a held-out validation.
    for round in 0..4u64 {
        let probe = validate_tube(&tube, params, 200, 0xCA11_B0A7 ^ round, cfg)?;
        if probe.worst_escape == 0.0 {
            break;
        }
        let pad = Vector2::repeat(2.0 * probe.worst_escape);
        for iv in &mut tube.intervals {
            iv.half_widths += pad;
        }
    }
    let report = validate_tube(&tube, params, 100, 0xBEEF, cfg)?;
    if report.fraction < 1.0 {
        return Err(TubeError::ValidationFailed(report.fraction, report.worst_escape));
    }
    Ok(tube)
}

/// Sampling, affine center fit and inflation without the validation gate.
fn fit_tube(
    family: FamilyKind,
    cell: VelocityCell,
    p_box: ParamBox,
    params: &VehicleParams,
    cfg: &BuildConfig,
) -> Result<ReachTube, TubeError> {
    let t_f = family.t_f();
    let n_intervals = (t_f / cfg.interval_dt).round() as usize;
    let p_points = p_box.grid(cfg.p_grid);
    let us = lin_samples(cell.u, cfg.vel_samples.0);
    let vs = lin_samples(cell.v, cfg.vel_samples.1);
    let rs = lin_samples(cell.r, cfg.vel_samples.2);
    let mut vels: Vec<(f64, f64, f64)> = Vec::with_capacity(us.len() * vs.len() * rs.len());
    for &u in &us {
        for &v in &vs {
            for &r in &rs {
                vels.push((u, v, r));
            }
        }
    }

    // Per parameter point: bounding box of the union cloud over all velocity
    // samples, per interval.
    let per_p: Vec<(Vector2<f64>, Vec<(Vector2<f64>, Vector2<f64>)>)> = p_points
        .par_iter()
        .map(|&p| {
            let mut boxes: Vec<(Vector2<f64>, Vector2<f64>)> = vec![
                (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
                n_intervals
            ];
            for &vel in &vels {
                let clouds = sweep_corners(family, p, vel, params, cfg, n_intervals)
                    .map_err(TubeError::Dynamics)?;
                for (j, cloud) in clouds.iter().enumerate() {
                    for w in cloud {
                        boxes[j].0 = boxes[j].0.inf(w);
                        boxes[j].1 = boxes[j].1.sup(w);
                    }
                }
            }
            Ok((p, boxes))
        })
        .collect::<Result<_, TubeError>>()?;

    // Affine fit of interval centers against p, then inflate.
    let n = per_p.len();
    let mut intervals = Vec::with_capacity(n_intervals);
    let mut worst_residual = Vector2::zeros();
    for j in 0..n_intervals {
        let mut design = DMatrix::zeros(n, 3);
        let mut target = DMatrix::zeros(n, 2);
        for (row, (p, boxes)) in per_p.iter().enumerate() {
            let mid = 0.5 * (boxes[j].0 + boxes[j].1);
            design[(row, 0)] = p.x;
            design[(row, 1)] = p.y;
            design[(row, 2)] = 1.0;
            target[(row, 0)] = mid.x;
            target[(row, 1)] = mid.y;
        }
        let svd = design.clone().svd(true, true);
        let coef = svd.solve(&target, 1e-12).expect("least squares solve");
        let a = Matrix2xX::from_row_slice(&[
            coef[(0, 0)],
            coef[(1, 0)],
            coef[(0, 1)],
            coef[(1, 1)],
        ]);
        let center = Vector2::new(coef[(2, 0)], coef[(2, 1)]);

        let mut residual = Vector2::zeros();
        let mut hw = Vector2::zeros();
        for (row, (p, boxes)) in per_p.iter().enumerate() {
            let fit = center + a.column(0) * p.x + a.column(1) * p.y;
            let mid = Vector2::new(target[(row, 0)], target[(row, 1)]);
            let res = (mid - fit).abs();
            residual = residual.sup(&res);
            let half = 0.5 * (boxes[j].1 - boxes[j].0);
            hw = hw.sup(&(half + res));
        }
        worst_residual = worst_residual.sup(&residual);
        let margin = Vector2::repeat(cfg.bloat) + residual * cfg.residual_factor;
        intervals.push(TubeInterval { center, a, half_widths: hw + margin });
    }

    Ok(ReachTube {
        family,
        cell,
        p_box,
        dt: cfg.interval_dt,
        t_m: family.t_m(),
        t_f,
        intervals,
        fit_residual: worst_residual,
    })
}

/// Held-out containment check result; a sound tube reaches `fraction = 1.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOutcome {
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    pub fraction: f64,
    /// Largest distance a violating footprint corner lies outside its
    /// interval zonotope [m]; 0 when fully contained.
    pub worst_escape: f64,
}

/// Simulate `n_trials` fresh (velocity, parameter) samples and check that
/// every sub-sampled footprint stays inside its interval's zonotope. The
/// validator sub-samples twice as densely as the builder.
pub fn validate_tube(
    tube: &ReachTube,
    params: &VehicleParams,
    n_trials: usize,
    seed: u64,
    cfg: &BuildConfig,
) -> Result<ValidationOutcome, TubeError> {
    let n_intervals = tube.n_intervals();
    let dense = BuildConfig { sub_samples: cfg.sub_samples * 2, ..cfg.clone() };
    let per_trial = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let vel = (
                rng.random_range(tube.cell.u.0..=tube.cell.u.1),
                rng.random_range(tube.cell.v.0..=tube.cell.v.1),
                rng.random_range(tube.cell.r.0..=tube.cell.r.1),
            );
            let p = tube.p_box.sample(&mut rng);
            let clouds = sweep_corners(tube.family, p, vel, params, &dense, n_intervals)
                .map_err(TubeError::Dynamics)?;
            let mut checks = 0usize;
            let mut violations = 0usize;
            let mut worst = 0.0f64;
            for (j, cloud) in clouds.iter().enumerate() {
                let zono = tube.zonotope_at(j, p);
                let (lo, hi) = zono.bounding_box();
                for w in cloud {
                    checks += 1;
                    if !zono.contains_point(*w) {
                        violations += 1;
                        // Body-frame tube zonotopes are axis-aligned boxes.
                        let dx = (lo.x - w.x).max(w.x - hi.x).max(0.0);
                        let dy = (lo.y - w.y).max(w.y - hi.y).max(0.0);
                        worst = worst.max(dx.max(dy));
                    }
                }
            }
            Ok((checks, violations, worst))
        })
        .collect::<Result<Vec<(usize, usize, f64)>, TubeError>>()?;
    let checks: usize = per_trial.iter().map(|c| c.0).sum();
    let violations: usize = per_trial.iter().map(|c| c.1).sum();
    let worst_escape = per_trial.iter().map(|c| c.2).fold(0.0, f64::max);
    let fraction =
        if checks == 0 { 1.0 } else { 1.0 - violations as f64 / checks as f64 };
    Ok(ValidationOutcome { trials: n_trials, checks, violations, fraction, worst_escape })
}
