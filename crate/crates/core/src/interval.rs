//! Minimal interval arithmetic for sound Hessian enclosures.
//!
//! Intervals are closed `[lo, hi]` with plain f64 endpoint arithmetic; the
//! enclosures they feed only need to dominate sampled Hessians by margins far
//! above rounding noise.

use nalgebra::{Matrix2, Vector2};
use std::ops::{Add, Mul, Neg, Sub};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iv {
    pub lo: f64,
    pub hi: f64,
}

impl Iv {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval endpoints out of order: [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn hull(&self, other: Iv) -> Iv {
        Iv { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    /// Intersect with `[0, inf)`; valid when the true range is nonnegative.
    pub fn clamp_nonneg(&self) -> Iv {
        Iv { lo: self.lo.max(0.0), hi: self.hi.max(0.0) }
    }

    /// Monotone image under exp.
    pub fn exp(&self) -> Iv {
        Iv { lo: self.lo.exp(), hi: self.hi.exp() }
    }

    /// `x^n` for n >= 0 on a nonnegative interval (monotone).
    pub fn pow_nonneg(&self, n: i32) -> Iv {
        debug_assert!(self.lo >= 0.0 && n >= 0);
        if n == 0 {
            return Iv::point(1.0);
        }
        Iv { lo: self.lo.powi(n), hi: self.hi.powi(n) }
    }

    pub fn scale(&self, s: f64) -> Iv {
        if s >= 0.0 {
            Iv { lo: self.lo * s, hi: self.hi * s }
        } else {
            Iv { lo: self.hi * s, hi: self.lo * s }
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Add for Iv {
    type Output = Iv;
    fn add(self, rhs: Iv) -> Iv {
        Iv { lo: self.lo + rhs.lo, hi: self.hi + rhs.hi }
    }
}

impl Sub for Iv {
    type Output = Iv;
    fn sub(self, rhs: Iv) -> Iv {
        Iv { lo: self.lo - rhs.hi, hi: self.hi - rhs.lo }
    }
}

impl Mul for Iv {
    type Output = Iv;
    fn mul(self, rhs: Iv) -> Iv {
        let c = [self.lo * rhs.lo, self.lo * rhs.hi, self.hi * rhs.lo, self.hi * rhs.hi];
        Iv {
            lo: c.iter().copied().fold(f64::INFINITY, f64::min),
            hi: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl Neg for Iv {
    type Output = Iv;
    fn neg(self) -> Iv {
        Iv { lo: -self.hi, hi: -self.lo }
    }
}

/// Element-wise interval enclosure of a symmetric 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval2x2 {
    pub lower: Matrix2<f64>,
    pub upper: Matrix2<f64>,
}

impl Interval2x2 {
    pub fn from_entries(entries: [[Iv; 2]; 2]) -> Self {
        let mut lower = Matrix2::zeros();
        let mut upper = Matrix2::zeros();
        for r in 0..2 {
            for c in 0..2 {
                lower[(r, c)] = entries[r][c].lo;
                upper[(r, c)] = entries[r][c].hi;
            }
        }
        Self { lower, upper }
    }

    pub fn point(m: Matrix2<f64>) -> Self {
        Self { lower: m, upper: m }
    }

    pub fn zero() -> Self {
        Self { lower: Matrix2::zeros(), upper: Matrix2::zeros() }
    }

    pub fn contains(&self, m: &Matrix2<f64>) -> bool {
        (0..2).all(|r| (0..2).all(|c| self.lower[(r, c)] <= m[(r, c)] && m[(r, c)] <= self.upper[(r, c)]))
    }

    pub fn hull(&self, other: &Interval2x2) -> Interval2x2 {
        Interval2x2 {
            lower: self.lower.inf(&other.lower),
            upper: self.upper.sup(&other.upper),
        }
    }

    /// Hull with the zero matrix (for densities extended by 0 off-support).
    pub fn hull_zero(&self) -> Interval2x2 {
        self.hull(&Interval2x2::zero())
    }

    pub fn add(&self, other: &Interval2x2) -> Interval2x2 {
        Interval2x2 { lower: self.lower + other.lower, upper: self.upper + other.upper }
    }

    pub fn scale(&self, s: f64) -> Interval2x2 {
        if s >= 0.0 {
            Interval2x2 { lower: self.lower * s, upper: self.upper * s }
        } else {
            Interval2x2 { lower: self.upper * s, upper: self.lower * s }
        }
    }
}

/// Axis-aligned box in the plane used as enclosure input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2 {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

impl Box2 {
    pub fn new(lo: Vector2<f64>, hi: Vector2<f64>) -> Self {
        debug_assert!(lo.x <= hi.x && lo.y <= hi.y);
        Self { lo, hi }
    }

    pub fn point(p: Vector2<f64>) -> Self {
        Self { lo: p, hi: p }
    }

    pub fn x(&self) -> Iv {
        Iv::new(self.lo.x, self.hi.x)
    }

    pub fn y(&self) -> Iv {
        Iv::new(self.lo.y, self.hi.y)
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        self.lo.x <= p.x && p.x <= self.hi.x && self.lo.y <= p.y && p.y <= self.hi.y
    }

    pub fn intersect(&self, other: &Box2) -> Option<Box2> {
        let lo = self.lo.sup(&other.lo);
        let hi = self.hi.inf(&other.hi);
        if lo.x <= hi.x && lo.y <= hi.y {
            Some(Box2 { lo, hi })
        } else {
            None
        }
    }

    /// Minkowski-style expansion by another box (component-wise sum).
    pub fn expand(&self, lo: Vector2<f64>, hi: Vector2<f64>) -> Box2 {
        Box2 { lo: self.lo + lo, hi: self.hi + hi }
    }
}
