//! Hybrid closed-loop vehicle simulation.
//!
//! A 6-state planar model is used above the critical speed `u_c` and a
//! 4-state steady-state cornering model below it, coupled through a guard at
//! `u = u_c` with reset maps in both directions. The tracking controller
//! commands the front tire forces directly (partial feedback linearization
//! with a robust error term whose gains grow with the accumulated squared
//! tracking error), so the closed-loop longitudinal error dynamics are linear
//! and the desired-speed feedforward is exact.
//!
//! Integration is fixed-step RK4 with bisection-based guard localization.

use crate::zonotope::{rot, Zonotope2};
use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("step size must be positive")]
    BadStep,
}

/// Guard-crossing localization tolerance in seconds.
pub const GUARD_TOL: f64 = 1e-6;

/// Below this speed with a zero speed reference the vehicle is parked: the
/// integrator pins u to exactly zero (static friction stand-in).
const PARK_SPEED: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    High,
    Low,
}

/// Vehicle state. In low mode `v` and `r` are steady-state outputs rather
/// than integrated states but are kept filled in for traces. `iu` / `ir`
/// carry the controller's accumulated squared tracking errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub mode: Mode,
    pub iu: f64,
    pub ir: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, h: f64) -> Self {
        Self { t: 0.0, x, y, h, u: 0.0, v: 0.0, r: 0.0, mode: Mode::Low, iu: 0.0, ir: 0.0 }
    }

    pub fn moving(x: f64, y: f64, h: f64, u: f64, params: &VehicleParams) -> Self {
        let mode = if u > params.u_c { Mode::High } else { Mode::Low };
        Self { t: 0.0, x, y, h, u, v: 0.0, r: 0.0, mode, iu: 0.0, ir: 0.0 }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        [self.t, self.x, self.y, self.h, self.u, self.v, self.r, self.iu, self.ir]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Reset planning-local quantities (time and controller accumulators).
    pub fn reset_clock(mut self) -> Self {
        self.t = 0.0;
        self.iu = 0.0;
        self.ir = 0.0;
        self
    }
}

/// Vehicle, tire and controller parameters. The defaults describe a generic
/// full-size front-wheel-drive sedan; they are not measured values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleParams {
    pub m: f64,
    pub izz: f64,
    pub lf: f64,
    pub lr: f64,
    /// Front / rear cornering stiffness [N/rad].
    pub c_af: f64,
    pub c_ar: f64,
    /// Footprint length / width [m].
    pub length: f64,
    pub width: f64,
    /// High/low model switching speed [m/s].
    pub u_c: f64,
    /// Disturbance bounds [m/s^2, m/s^2, rad/s^2].
    pub m_u: f64,
    pub m_v: f64,
    pub m_r: f64,
    pub k_u: f64,
    pub k_h: f64,
    pub k_r: f64,
    pub kappa1_u: f64,
    pub kappa2_u: f64,
    pub phi1_u: f64,
    pub phi2_u: f64,
    pub kappa1_r: f64,
    pub kappa2_r: f64,
    pub phi1_r: f64,
    pub phi2_r: f64,
    /// Contingency braking deceleration [m/s^2].
    pub brake_decel: f64,
    /// Steering angle saturation [rad].
    pub delta_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1500.0,
            izz: 2500.0,
            lf: 1.4,
            lr: 1.4,
            c_af: 90_000.0,
            c_ar: 100_000.0,
            length: 4.8,
            width: 2.0,
            u_c: 1.5,
            m_u: 0.02,
            m_v: 0.02,
            m_r: 0.02,
            k_u: 4.0,
            k_h: 4.0,
            k_r: 6.0,
            kappa1_u: 1.0,
            kappa2_u: 2.0,
            phi1_u: 1.0,
            phi2_u: 2.0,
            kappa1_r: 1.0,
            kappa2_r: 2.0,
            phi1_r: 1.0,
            phi2_r: 2.0,
            brake_decel: 5.0,
            delta_max: 0.6,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    pub fn understeer(&self) -> f64 {
        self.m / self.wheelbase() * (self.lr / self.c_af - self.lf / self.c_ar)
    }

    /// Footprint half-extents as a 2-generator box at the origin.
    pub fn footprint(&self) -> Zonotope2 {
        Zonotope2::aabb(Vector2::zeros(), Vector2::new(0.5 * self.length, 0.5 * self.width))
    }
}

/// Ego footprint at the given pose: `rot(h) O_ego + (x, y)`.
pub fn footprint_at(state: &VehicleState, params: &VehicleParams) -> Zonotope2 {
    params
        .footprint()
        .linear_map(&rot(state.h))
        .translate(state.position())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    SpeedChange,
    DirectionChange,
    LaneChange,
    LeftTurn,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::SpeedChange,
        FamilyKind::DirectionChange,
        FamilyKind::LaneChange,
        FamilyKind::LeftTurn,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FamilyKind::SpeedChange => "speed_change",
            FamilyKind::DirectionChange => "direction_change",
            FamilyKind::LaneChange => "lane_change",
            FamilyKind::LeftTurn => "left_turn",
        }
    }

    pub fn from_label(s: &str) -> Option<FamilyKind> {
        FamilyKind::ALL.iter().copied().find(|f| f.label() == s)
    }

    /// Driving-maneuver duration [s].
    pub fn t_m(&self) -> f64 {
        match self {
            FamilyKind::SpeedChange | FamilyKind::DirectionChange => 3.0,
            FamilyKind::LaneChange => 6.0,
            FamilyKind::LeftTurn => 4.0,
        }
    }

    /// Total horizon [s]: driving maneuver plus contingency braking sized for
    /// the family's maximum commanded speed.
    pub fn t_f(&self) -> f64 {
        match self {
            FamilyKind::SpeedChange | FamilyKind::DirectionChange => 7.5,
            FamilyKind::LaneChange => 10.5,
            FamilyKind::LeftTurn => 7.0,
        }
    }
}

/// A parameterized desired trajectory in the planning-local frame (the pose
/// at t = 0 is the frame origin; headings are relative).
///
/// `p = (p_u, p_y)`: desired longitudinal speed and lateral command. Every
/// family ends with a braking ramp that brings the speed reference to zero
/// strictly before `t_f` and holds it there.
#[derive(Debug, Clone, Copy)]
pub struct DesiredTrajectory {
    pub family: FamilyKind,
    pub t_m: f64,
    pub t_f: f64,
    /// Longitudinal speed at the start of the maneuver, blended from over a
    /// short ramp (except the left turn, which has its own launch profile).
    pub u0: f64,
}

/// Desired values and time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredPoint {
    pub u: f64,
    pub du: f64,
    pub r: f64,
    pub dr: f64,
    pub h: f64,
}

impl DesiredTrajectory {
    pub fn new(family: FamilyKind, u0: f64) -> Self {
        Self { family, t_m: family.t_m(), t_f: family.t_f(), u0 }
    }

    /// Time after which all reference magnitudes are non-increasing.
    pub fn t_nb(&self) -> f64 {
        self.t_m
    }

    /// Time at which the speed reference reaches zero.
    pub fn t_stop(&self, p: Vector2<f64>, params: &VehicleParams) -> f64 {
        self.t_m + self.peak_speed(p) / params.brake_decel
    }

    fn peak_speed(&self, p: Vector2<f64>) -> f64 {
        // All families hold u_des = p_u at the end of the driving maneuver.
        p.x.max(0.0)
    }

    /// Evaluate the desired trajectory. Queries beyond `t_f` return the
    /// `t_f` values.
    pub fn eval(&self, t: f64, p: Vector2<f64>, params: &VehicleParams) -> DesiredPoint {
        let t = t.clamp(0.0, self.t_f);
        let tm = self.t_m;
        if t >= tm {
            return self.braking(t, p, params);
        }
        let (p_u, p_y) = (p.x, p.y);
        match self.family {
            FamilyKind::SpeedChange => {
                let ramp = 0.5 * tm;
                let (u, du) = if t < ramp {
                    (self.u0 + (p_u - self.u0) * t / ramp, (p_u - self.u0) / ramp)
                } else {
                    (p_u, 0.0)
                };
                DesiredPoint { u, du, r: 0.0, dr: 0.0, h: 0.0 }
            }
            FamilyKind::DirectionChange => {
                let (u, du) = self.speed_blend(t, p_u);
                let w = 2.0 * std::f64::consts::PI / tm;
                let r = 0.5 * p_y * (1.0 - (w * t).cos());
                let dr = 0.5 * p_y * w * (w * t).sin();
                let h = 0.5 * p_y * (t - (w * t).sin() / w);
                DesiredPoint { u, du, r, dr, h }
            }
            FamilyKind::LaneChange => {
                let (u, du) = self.speed_blend(t, p_u);
                let w = 2.0 * std::f64::consts::PI / tm;
                let r = p_y * (w * t).sin();
                let dr = p_y * w * (w * t).cos();
                let h = p_y / w * (1.0 - (w * t).cos());
                DesiredPoint { u, du, r, dr, h }
            }
            FamilyKind::LeftTurn => self.left_turn(t, p_u, p_y),
        }
    }

    /// One-second blend from the entry speed to p_u, then hold.
    fn speed_blend(&self, t: f64, p_u: f64) -> (f64, f64) {
        let ramp = 1.0_f64.min(self.t_m);
        if t < ramp {
            (self.u0 + (p_u - self.u0) * t / ramp, (p_u - self.u0) / ramp)
        } else {
            (p_u, 0.0)
        }
    }

    /// Launch ramp at 11/2 m/s^2 when the speed target exceeds what the ramp
    /// reaches by tm/4, constant speed reference otherwise; yaw-rate bump
    /// that rises over the first quarter, holds, and falls over the last.
    fn left_turn(&self, t: f64, p_u: f64, p_y: f64) -> DesiredPoint {
        let tm = self.t_m;
        let (u, du) = if t < 0.25 * tm && p_u > 11.0 / 8.0 * tm {
            (5.5 * t, 5.5)
        } else {
            (p_u, 0.0)
        };
        let w = 4.0 * std::f64::consts::PI / tm;
        let q = 0.25 * tm;
        let (r, dr, h) = if t < q {
            (
                0.5 * p_y * (1.0 - (w * t).cos()),
                0.5 * p_y * w * (w * t).sin(),
                0.5 * p_y * (t - (w * t).sin() / w),
            )
        } else if t < 3.0 * q {
            (p_y, 0.0, 0.125 * p_y * tm + p_y * (t - q))
        } else {
            (
                0.5 * p_y * (1.0 - (w * t).cos()),
                0.5 * p_y * w * (w * t).sin(),
                0.625 * p_y * tm + 0.5 * p_y * (t - 3.0 * q - (w * t).sin() / w),
            )
        };
        DesiredPoint { u, du, r, dr, h }
    }

    /// Contingency braking tail: speed ramps to zero at the configured
    /// deceleration and holds; heading holds its end-of-maneuver value.
    fn braking(&self, t: f64, p: Vector2<f64>, params: &VehicleParams) -> DesiredPoint {
        let u_pk = self.peak_speed(p);
        let s = t - self.t_m;
        let (u, du) = if u_pk > params.brake_decel * s {
            (u_pk - params.brake_decel * s, -params.brake_decel)
        } else {
            (0.0, 0.0)
        };
        DesiredPoint { u, du, r: 0.0, dr: 0.0, h: self.heading_end(p) }
    }

    /// Heading reference at and after the end of the driving maneuver.
    fn heading_end(&self, p: Vector2<f64>) -> f64 {
        match self.family {
            FamilyKind::SpeedChange => 0.0,
            FamilyKind::DirectionChange => 0.5 * p.y * self.t_m,
            FamilyKind::LaneChange => 0.0,
            FamilyKind::LeftTurn => 0.75 * p.y * self.t_m,
        }
    }
}

/// Bounded disturbance on (du, dv, dr).
#[derive(Debug, Clone)]
pub enum Disturbance {
    Zero,
    /// Piecewise-linear noise with knots every `knot_dt` seconds, each channel
    /// uniform within its (M_u, M_v, M_r) bound scaled by `scale` in [0, 1].
    BandLimited { seed: u64, knot_dt: f64, scale: f64 },
}

impl Disturbance {
    fn eval(&self, t: f64, params: &VehicleParams) -> [f64; 3] {
        match self {
            Disturbance::Zero => [0.0; 3],
            Disturbance::BandLimited { seed, knot_dt, scale } => {
                let bounds = [params.m_u, params.m_v, params.m_r];
                let idx = (t / knot_dt).floor().max(0.0) as u64;
                let frac = (t / knot_dt - idx as f64).clamp(0.0, 1.0);
                let mut out = [0.0; 3];
                for (c, bound) in bounds.iter().enumerate() {
                    let a = knot_value(*seed, idx, c as u64);
                    let b = knot_value(*seed, idx + 1, c as u64);
                    out[c] = scale * bound * (a + (b - a) * frac);
                }
                out
            }
        }
    }
}

/// Deterministic knot in [-1, 1] for (seed, knot index, channel).
fn knot_value(seed: u64, idx: u64, channel: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ channel.wrapping_mul(0xD1B5_4A32_D192_ED03),
    );
    rng.random_range(-1.0..=1.0)
}

/// Augmented continuous state for one mode (guard handling excluded).
#[derive(Clone, Copy)]
struct Ode8 {
    x: f64,
    y: f64,
    h: f64,
    u: f64,
    v: f64,
    r: f64,
    iu: f64,
    ir: f64,
}

impl Ode8 {
    fn from_state(s: &VehicleState) -> Self {
        Ode8 { x: s.x, y: s.y, h: s.h, u: s.u, v: s.v, r: s.r, iu: s.iu, ir: s.ir }
    }

    fn axpy(&self, dt: f64, d: &Ode8) -> Ode8 {
        Ode8 {
            x: self.x + dt * d.x,
            y: self.y + dt * d.y,
            h: self.h + dt * d.h,
            u: self.u + dt * d.u,
            v: self.v + dt * d.v,
            r: self.r + dt * d.r,
            iu: self.iu + dt * d.iu,
            ir: self.ir + dt * d.ir,
        }
    }
}

struct ClosedLoop<'a> {
    params: &'a VehicleParams,
    traj: &'a DesiredTrajectory,
    p: Vector2<f64>,
    h_ref: f64,
    dist: [f64; 3],
}

impl ClosedLoop<'_> {
    fn robust_u(&self, e_u: f64, iu: f64) -> f64 {
        let pr = self.params;
        let kappa = pr.kappa1_u + pr.kappa2_u * iu;
        let phi = pr.phi1_u + pr.phi2_u * iu;
        -(kappa * pr.m_u + phi) * e_u
    }

    fn robust_r(&self, e_r: f64, ir: f64) -> f64 {
        let pr = self.params;
        let kappa = pr.kappa1_r + pr.kappa2_r * ir;
        let phi = pr.phi1_r + pr.phi2_r * ir;
        -(kappa * pr.m_r + phi) * e_r
    }

    fn deriv(&self, t: f64, s: &Ode8, mode: Mode) -> Ode8 {
        let pr = self.params;
        let des = self.traj.eval(t, self.p, pr);
        let h_des = self.h_ref + des.h;
        let e_u = s.u - des.u;
        let tau_u = self.robust_u(e_u, s.iu);
        // Closed-loop longitudinal dynamics (same in both modes).
        let du_cl = tau_u + des.du - pr.k_u * e_u + self.dist[0];
        match mode {
            Mode::High => {
                let u_safe = s.u.max(0.5 * pr.u_c);
                let fyr = -pr.c_ar * (s.v - pr.lr * s.r) / u_safe;
                let e_h = s.h - h_des;
                let e_r_raw = s.r - des.r;
                let e_r = pr.k_r * e_r_raw + pr.k_h * e_h;
                let tau_r = self.robust_r(e_r, s.ir);
                let fyf = -pr.izz * pr.k_r / pr.lf * e_r_raw + pr.izz / pr.lf * des.dr
                    - pr.izz * pr.k_h / pr.lf * e_h
                    + pr.lr / pr.lf * fyr
                    + pr.izz / pr.lf * tau_r;
                Ode8 {
                    x: s.u * s.h.cos() - s.v * s.h.sin(),
                    y: s.u * s.h.sin() + s.v * s.h.cos(),
                    h: s.r,
                    u: du_cl + s.v * s.r,
                    v: (fyf + fyr) / pr.m - s.u * s.r + self.dist[1],
                    r: (pr.lf * fyf - pr.lr * fyr) / pr.izz + self.dist[2],
                    iu: e_u * e_u,
                    ir: e_r_raw * e_r_raw + e_h * e_h,
                }
            }
            Mode::Low => {
                let (v_lo, r_lo) = self.low_speed_outputs(s.u, des.r);
                let parked = des.u == 0.0 && s.u.abs() <= PARK_SPEED;
                Ode8 {
                    x: s.u * s.h.cos() - v_lo * s.h.sin(),
                    y: s.u * s.h.sin() + v_lo * s.h.cos(),
                    h: r_lo,
                    u: if parked { 0.0 } else { du_cl },
                    v: 0.0,
                    r: 0.0,
                    iu: e_u * e_u,
                    ir: (r_lo - des.r).powi(2) + (s.h - h_des).powi(2),
                }
            }
        }
    }

    /// Steady-state cornering outputs; the steering angle inverts the yaw
    /// gain to track the reference, saturated at delta_max.
    fn low_speed_outputs(&self, u: f64, r_des: f64) -> (f64, f64) {
        let pr = self.params;
        let l = pr.wheelbase();
        let cus = pr.understeer();
        let gain_den = l + cus * u * u;
        let delta = if u > 0.05 {
            (r_des * gain_den / u).clamp(-pr.delta_max, pr.delta_max)
        } else {
            0.0
        };
        let r_lo = delta * u / gain_den;
        let v_lo = pr.lr * r_lo - pr.m * pr.lf / (pr.c_ar * l) * u * u * r_lo;
        (v_lo, r_lo)
    }

    fn rk4(&self, t: f64, s: &Ode8, dt: f64, mode: Mode) -> Ode8 {
        let k1 = self.deriv(t, s, mode);
        let k2 = self.deriv(t + 0.5 * dt, &s.axpy(0.5 * dt, &k1), mode);
        let k3 = self.deriv(t + 0.5 * dt, &s.axpy(0.5 * dt, &k2), mode);
        let k4 = self.deriv(t + dt, &s.axpy(dt, &k3), mode);
        let mut out = s.axpy(dt / 6.0, &k1);
        out = out.axpy(dt / 3.0, &k2);
        out = out.axpy(dt / 3.0, &k3);
        out.axpy(dt / 6.0, &k4)
    }
}

/// Advance the hybrid system by one step of length `dt`.
///
/// A guard crossing (`u` passing `u_c`) inside the step is localized by
/// bisection to `GUARD_TOL` seconds, the reset map is applied, and the
/// remainder of the step continues in the new mode. `h_ref` is the world
/// heading at the start of the maneuver (references are relative to it).
pub fn step(
    state: &VehicleState,
    params: &VehicleParams,
    traj: &DesiredTrajectory,
    p: Vector2<f64>,
    h_ref: f64,
    dt: f64,
    disturbance: [f64; 3],
) -> Result<VehicleState, DynamicsError> {
    if dt <= 0.0 {
        return Err(DynamicsError::BadStep);
    }
    let cl = ClosedLoop { params, traj, p, h_ref, dist: disturbance };
    let mut t = state.t;
    let mut mode = state.mode;
    let mut s = Ode8::from_state(state);
    let mut remaining = dt;

    // Keep v, r coherent in low mode for traces and resets.
    if mode == Mode::Low {
        let des = traj.eval(t, p, params);
        let (v_lo, r_lo) = cl.low_speed_outputs(s.u, des.r);
        s.v = v_lo;
        s.r = r_lo;
    }

    let mut guard_budget = 4; // at most a few crossings per step
    while remaining > 1e-12 {
        let trial = cl.rk4(t, &s, remaining, mode);
        let crossed = match mode {
            Mode::High => trial.u <= params.u_c && s.u > params.u_c,
            Mode::Low => trial.u > params.u_c && s.u <= params.u_c,
        };
        if !crossed || guard_budget == 0 {
            s = trial;
            t += remaining;
            remaining = 0.0;
        } else {
            // Bisect the substep length until the crossing instant is pinned.
            let (mut lo, mut hi) = (0.0, remaining);
            while hi - lo > GUARD_TOL {
                let mid = 0.5 * (lo + hi);
                let probe = cl.rk4(t, &s, mid, mode);
                let past = match mode {
                    Mode::High => probe.u <= params.u_c,
                    Mode::Low => probe.u > params.u_c,
                };
                if past {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            s = cl.rk4(t, &s, hi, mode);
            t += hi;
            remaining -= hi;
            guard_budget -= 1;
            // Reset map: crossing downward keeps (x, y, h, u) and replaces
            // v, r by the steady-state outputs; crossing upward initializes
            // the high-speed states from the same outputs.
            let des = traj.eval(t, p, params);
            let (v_lo, r_lo) = cl.low_speed_outputs(s.u, des.r);
            s.v = v_lo;
            s.r = r_lo;
            mode = match mode {
                Mode::High => Mode::Low,
                Mode::Low => Mode::High,
            };
        }
    }

    if mode == Mode::Low {
        let des = traj.eval(t, p, params);
        let (v_lo, r_lo) = cl.low_speed_outputs(s.u, des.r);
        s.v = v_lo;
        s.r = r_lo;
        if des.u == 0.0 && s.u.abs() <= PARK_SPEED {
            s.u = 0.0;
        }
    }

    let out = VehicleState {
        t,
        x: s.x,
        y: s.y,
        h: s.h,
        u: s.u,
        v: s.v,
        r: s.r,
        mode,
        iu: s.iu,
        ir: s.ir,
    };
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite(t));
    }
    Ok(out)
}

/// Simulate the closed loop over `[0, t_f]` from `z0` at fixed `dt`,
/// returning the trace including the initial state. Deterministic for a
/// given disturbance source.
pub fn simulate(
    traj: &DesiredTrajectory,
    p: Vector2<f64>,
    z0: &VehicleState,
    params: &VehicleParams,
    dt: f64,
    disturbance: &Disturbance,
) -> Result<Vec<VehicleState>, DynamicsError> {
    let n = (traj.t_f / dt).round() as usize;
    let mut trace = Vec::with_capacity(n + 1);
    let mut state = z0.reset_clock();
    let h_ref = z0.h;
    trace.push(state);
    for _ in 0..n {
        let d = disturbance.eval(state.t, params);
        state = step(&state, params, traj, p, h_ref, dt, d)?;
        trace.push(state);
    }
    Ok(trace)
}
