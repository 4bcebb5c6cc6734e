//! Obstacle-location probability densities.
//!
//! Three twice-differentiable families: Gaussian, Gaussian mixture, and a
//! product-form bivariate beta with a bounded correlation term. Each exposes
//! exact value / gradient / Hessian plus a sound element-wise interval
//! enclosure of the Hessian over an axis-aligned box.
//!
//! The pointwise and interval paths share one generic implementation of the
//! formulas: evaluating on a zero-width box reproduces the exact Hessian.

use crate::interval::{Box2, Interval2x2, Iv};
use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdfError {
    #[error("covariance must be symmetric positive definite")]
    NotSpd,
    #[error("mixture needs one weight per component and positive total weight")]
    BadMixture,
    #[error("beta shape parameters must be >= 3 for a C^2 density")]
    BadShape,
    #[error("beta correlation rho = {0} makes the density negative")]
    BadRho(f64),
    #[error("beta support box must have positive extent")]
    BadSupport,
    #[error("obstacle field needs one pdf per (obstacle, interval) pair")]
    RaggedField,
}

/// Scalar abstraction shared by the exact (f64) and enclosure (interval)
/// evaluation paths.
trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn exp(self) -> Self;
    fn scale(self, s: f64) -> Self;
    /// Identity for exact scalars; intersects with [0, inf) for intervals
    /// whose true range is known nonnegative.
    fn nonneg(self) -> Self;
    /// `self^r` for a base in [0, 1] and r >= 0 (monotone).
    fn pow_unit(self, r: f64) -> Self;
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn nonneg(self) -> Self {
        self
    }
    fn pow_unit(self, r: f64) -> Self {
        self.max(0.0).powf(r)
    }
}

impl Scalar for Iv {
    fn of(x: f64) -> Self {
        Iv::point(x)
    }
    fn exp(self) -> Self {
        Iv::exp(&self)
    }
    fn scale(self, s: f64) -> Self {
        Iv::scale(&self, s)
    }
    fn nonneg(self) -> Self {
        self.clamp_nonneg()
    }
    fn pow_unit(self, r: f64) -> Self {
        Iv::new(self.lo.max(0.0).powf(r), self.hi.max(0.0).powf(r))
    }
}

/// Bivariate Gaussian with precomputed precision, normalizer and Cholesky
/// factor (for sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    precision: Matrix2<f64>,
    norm: f64,
    chol: Matrix2<f64>,
}

impl Gaussian {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self, PdfError> {
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 {
            return Err(PdfError::NotSpd);
        }
        let chol = nalgebra::Cholesky::new(cov).ok_or(PdfError::NotSpd)?;
        let precision = cov.try_inverse().ok_or(PdfError::NotSpd)?;
        let det = cov.determinant();
        Ok(Self {
            mean,
            cov,
            precision,
            norm: 1.0 / (2.0 * std::f64::consts::PI * det.sqrt()),
            chol: chol.unpack(),
        })
    }

    pub fn standard() -> Self {
        Self::new(Vector2::zeros(), Matrix2::identity()).expect("identity is SPD")
    }

    /// Largest covariance eigenvalue; used by tail bounds.
    pub fn max_eigenvalue(&self) -> f64 {
        let tr = self.cov.trace();
        let det = self.cov.determinant();
        0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt())
    }

    fn eval<N: Scalar>(&self, w: [N; 2]) -> GaussEval<N> {
        let d = [w[0] - N::of(self.mean.x), w[1] - N::of(self.mean.y)];
        let p = &self.precision;
        let g = [
            d[0].scale(p[(0, 0)]) + d[1].scale(p[(0, 1)]),
            d[0].scale(p[(1, 0)]) + d[1].scale(p[(1, 1)]),
        ];
        // Quadratic form d' P d is nonnegative for SPD P.
        let q = (d[0] * g[0] + d[1] * g[1]).nonneg();
        let f = q.scale(-0.5).exp().scale(self.norm);
        GaussEval { f, g }
    }
}

struct GaussEval<N> {
    /// Density value.
    f: N,
    /// `P (w - mu)`, so grad = -f g and hess = f (g g' - P).
    g: [N; 2],
}

/// Convex combination of Gaussians (weights normalized at construction).
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self, PdfError> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(PdfError::BadMixture);
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(PdfError::BadMixture);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(PdfError::BadMixture);
        }
        Ok(Self { weights: weights.into_iter().map(|w| w / total).collect(), components })
    }
}

/// Product-form bivariate beta on an axis-aligned support box.
///
/// In unit coordinates the density is
/// `C phi(x) psi(y) (1 + rho (x - mx)(y - my))` with `phi, psi` beta kernels
/// and `mx, my` the marginal means, so the cross term integrates to zero and
/// `C` stays the product of beta normalizers. Shapes >= 3 keep the density
/// C^2 across the support boundary where it is extended by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateBeta {
    pub shapes: [f64; 4],
    pub rho: f64,
    pub support_lo: Vector2<f64>,
    pub support_hi: Vector2<f64>,
    inv_norm: f64,
    mx: f64,
    my: f64,
}

impl BivariateBeta {
    pub fn new(
        shapes: [f64; 4],
        rho: f64,
        support_lo: Vector2<f64>,
        support_hi: Vector2<f64>,
    ) -> Result<Self, PdfError> {
        let [a, b, c, d] = shapes;
        if shapes.iter().any(|s| *s < 3.0) {
            return Err(PdfError::BadShape);
        }
        let s = support_hi - support_lo;
        if s.x <= 0.0 || s.y <= 0.0 {
            return Err(PdfError::BadSupport);
        }
        let mx = a / (a + b);
        let my = c / (c + d);
        // The cross term is bilinear, so its extrema sit at the unit-square
        // corners; require nonnegativity there.
        for cx in [0.0, 1.0] {
            for cy in [0.0, 1.0] {
                if 1.0 + rho * (cx - mx) * (cy - my) < 0.0 {
                    return Err(PdfError::BadRho(rho));
                }
            }
        }
        let ln_beta = |p: f64, q: f64| ln_gamma(p) + ln_gamma(q) - ln_gamma(p + q);
        let inv_norm = (-(ln_beta(a, b) + ln_beta(c, d))).exp() / (s.x * s.y);
        Ok(Self { shapes, rho, support_lo, support_hi, inv_norm, mx, my })
    }

    fn scale_vec(&self) -> Vector2<f64> {
        self.support_hi - self.support_lo
    }

    fn support_box(&self) -> Box2 {
        Box2::new(self.support_lo, self.support_hi)
    }

    /// Beta kernel `x^alpha (1-x)^beta` and its first two derivatives, for
    /// `alpha = shape1 - 1, beta = shape2 - 1` (both >= 2).
    fn kernel<N: Scalar>(x: N, shape1: f64, shape2: f64) -> (N, N, N) {
        let (al, be) = (shape1 - 1.0, shape2 - 1.0);
        let one_minus = N::of(1.0) - x;
        let v = x.pow_unit(al) * one_minus.pow_unit(be);
        let d1 = x.pow_unit(al - 1.0)
            * one_minus.pow_unit(be - 1.0)
            * (one_minus.scale(al) - x.scale(be));
        let quad = one_minus.pow_unit(2.0).scale(al * (al - 1.0))
            - (x * one_minus).scale(2.0 * al * be)
            + x.pow_unit(2.0).scale(be * (be - 1.0));
        let d2 = x.pow_unit(al - 2.0) * one_minus.pow_unit(be - 2.0) * quad;
        (v, d1, d2)
    }

    /// Value, gradient and Hessian in world coordinates, valid only when the
    /// unit coordinates lie in [0, 1]^2.
    fn eval<N: Scalar>(&self, w: [N; 2]) -> BetaEval<N> {
        let [a, b, c, d] = self.shapes;
        let s = self.scale_vec();
        let x = (w[0] - N::of(self.support_lo.x)).scale(1.0 / s.x);
        let y = (w[1] - N::of(self.support_lo.y)).scale(1.0 / s.y);
        let (phi, dphi, ddphi) = Self::kernel(x, a, b);
        let (psi, dpsi, ddpsi) = Self::kernel(y, c, d);
        let xc = x - N::of(self.mx);
        let yc = y - N::of(self.my);
        let h = N::of(1.0) + (xc * yc).scale(self.rho);
        let hx = yc.scale(self.rho);
        let hy = xc.scale(self.rho);
        let cn = self.inv_norm;
        let f = (phi * psi * h).scale(cn);
        let fx = (psi * (dphi * h + phi * hx)).scale(cn / s.x);
        let fy = (phi * (dpsi * h + psi * hy)).scale(cn / s.y);
        let fxx = (psi * (ddphi * h + (dphi * hx).scale(2.0))).scale(cn / (s.x * s.x));
        let fyy = (phi * (ddpsi * h + (dpsi * hy).scale(2.0))).scale(cn / (s.y * s.y));
        let fxy = (dphi * dpsi * h + dphi * psi * hy + phi * dpsi * hx + (phi * psi).scale(self.rho))
            .scale(cn / (s.x * s.y));
        BetaEval { f, grad: [fx, fy], hess: [fxx, fxy, fyy] }
    }
}

struct BetaEval<N> {
    f: N,
    grad: [N; 2],
    /// (xx, xy, yy)
    hess: [N; 3],
}

/// A twice-differentiable planar density.
#[derive(Debug, Clone, PartialEq)]
pub enum PdfModel {
    Gaussian(Gaussian),
    GaussianMixture(Mixture),
    BivariateBeta(BivariateBeta),
}

impl PdfModel {
    /// Exact density value (1/m^2).
    pub fn value(&self, w: Vector2<f64>) -> f64 {
        match self {
            PdfModel::Gaussian(g) => g.eval([w.x, w.y]).f,
            PdfModel::GaussianMixture(m) => m
                .weights
                .iter()
                .zip(&m.components)
                .map(|(wt, g)| wt * g.eval([w.x, w.y]).f)
                .sum(),
            PdfModel::BivariateBeta(b) => {
                if b.support_box().contains(w) {
                    b.eval([w.x, w.y]).f
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact gradient (1/m^3).
    pub fn grad(&self, w: Vector2<f64>) -> Vector2<f64> {
        match self {
            PdfModel::Gaussian(g) => {
                let e = g.eval([w.x, w.y]);
                Vector2::new(-e.f * e.g[0], -e.f * e.g[1])
            }
            PdfModel::GaussianMixture(m) => m
                .weights
                .iter()
                .zip(&m.components)
                .map(|(wt, g)| {
                    let e = g.eval([w.x, w.y]);
                    Vector2::new(-e.f * e.g[0], -e.f * e.g[1]) * *wt
                })
                .sum(),
            PdfModel::BivariateBeta(b) => {
                if b.support_box().contains(w) {
                    let e = b.eval([w.x, w.y]);
                    Vector2::new(e.grad[0], e.grad[1])
                } else {
                    Vector2::zeros()
                }
            }
        }
    }

    /// Exact symmetric Hessian (1/m^4).
    pub fn hessian(&self, w: Vector2<f64>) -> Matrix2<f64> {
        match self {
            PdfModel::Gaussian(g) => gaussian_hessian(g, [w.x, w.y], sym2),
            PdfModel::GaussianMixture(m) => m
                .weights
                .iter()
                .zip(&m.components)
                .fold(Matrix2::zeros(), |acc, (wt, g)| {
                    acc + gaussian_hessian(g, [w.x, w.y], sym2) * *wt
                }),
            PdfModel::BivariateBeta(b) => {
                if b.support_box().contains(w) {
                    let e = b.eval([w.x, w.y]);
                    sym2(e.hess[0], e.hess[1], e.hess[2])
                } else {
                    Matrix2::zeros()
                }
            }
        }
    }

    /// Sound element-wise enclosure of the Hessian over `query`:
    /// `lower <= Hess(w) <= upper` for every `w` in the box.
    pub fn hessian_interval(&self, query: &Box2) -> Interval2x2 {
        let bx = [query.x(), query.y()];
        match self {
            PdfModel::Gaussian(g) => gaussian_hessian(g, bx, iv_sym2),
            PdfModel::GaussianMixture(m) => m
                .weights
                .iter()
                .zip(&m.components)
                .fold(Interval2x2::zero(), |acc, (wt, g)| {
                    acc.add(&gaussian_hessian(g, bx, iv_sym2).scale(*wt))
                }),
            PdfModel::BivariateBeta(b) => match query.intersect(&b.support_box()) {
                None => Interval2x2::zero(),
                Some(clipped) => {
                    let e = b.eval([clipped.x(), clipped.y()]);
                    let enc = iv_sym2(e.hess[0], e.hess[1], e.hess[2]);
                    let fully_inside = clipped == *query;
                    if fully_inside {
                        enc
                    } else {
                        // Part of the box lies off-support where Hess = 0.
                        enc.hull_zero()
                    }
                }
            },
        }
    }

    /// Draw one sample; Gaussian via Cholesky, mixture via categorical pick,
    /// beta via rejection against the separable beta proposal.
    pub fn sample(&self, rng: &mut impl Rng) -> Vector2<f64> {
        match self {
            PdfModel::Gaussian(g) => sample_gaussian(g, rng),
            PdfModel::GaussianMixture(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (wt, g) in m.weights.iter().zip(&m.components) {
                    acc += wt;
                    if u <= acc {
                        return sample_gaussian(g, rng);
                    }
                }
                sample_gaussian(m.components.last().expect("nonempty mixture"), rng)
            }
            PdfModel::BivariateBeta(b) => {
                let [a, bb, c, d] = b.shapes;
                let bx = BetaDist::new(a, bb).expect("valid shapes");
                let by = BetaDist::new(c, d).expect("valid shapes");
                // max of the cross factor over the unit square corners
                let hmax = [0.0, 1.0]
                    .iter()
                    .flat_map(|&cx| {
                        [0.0, 1.0].iter().map(move |&cy| 1.0 + b.rho * (cx - b.mx) * (cy - b.my))
                    })
                    .fold(1.0f64, f64::max);
                loop {
                    let x: f64 = bx.sample(rng);
                    let y: f64 = by.sample(rng);
                    let h = 1.0 + b.rho * (x - b.mx) * (y - b.my);
                    if rng.random::<f64>() * hmax <= h {
                        let s = b.scale_vec();
                        return b.support_lo + Vector2::new(x * s.x, y * s.y);
                    }
                }
            }
        }
    }

    /// First moment.
    pub fn mean(&self) -> Vector2<f64> {
        match self {
            PdfModel::Gaussian(g) => g.mean,
            PdfModel::GaussianMixture(m) => m
                .weights
                .iter()
                .zip(&m.components)
                .map(|(wt, g)| g.mean * *wt)
                .sum(),
            PdfModel::BivariateBeta(b) => {
                let s = b.scale_vec();
                b.support_lo + Vector2::new(b.mx * s.x, b.my * s.y)
            }
        }
    }

    /// Second central moment.
    pub fn cov(&self) -> Matrix2<f64> {
        match self {
            PdfModel::Gaussian(g) => g.cov,
            PdfModel::GaussianMixture(m) => {
                let mean = self.mean();
                m.weights
                    .iter()
                    .zip(&m.components)
                    .fold(Matrix2::zeros(), |acc, (wt, g)| {
                        let d = g.mean - mean;
                        acc + (g.cov + d * d.transpose()) * *wt
                    })
            }
            PdfModel::BivariateBeta(b) => {
                let [a, bb, c, d] = b.shapes;
                let var = |p: f64, q: f64| p * q / ((p + q) * (p + q) * (p + q + 1.0));
                let (vx, vy) = (var(a, bb), var(c, d));
                let cxy = b.rho * vx * vy;
                let s = b.scale_vec();
                Matrix2::new(vx * s.x * s.x, cxy * s.x * s.y, cxy * s.x * s.y, vy * s.y * s.y)
            }
        }
    }

    /// True only when the total mass inside `query` is provably below
    /// `TAIL_MASS_BOUND`: Gaussian beyond 9 sigma (chi-square tail), beta with
    /// disjoint support.
    pub fn mass_negligible_in(&self, query: &Box2) -> bool {
        match self {
            PdfModel::Gaussian(g) => gaussian_far(g, query),
            PdfModel::GaussianMixture(m) => m.components.iter().all(|g| gaussian_far(g, query)),
            PdfModel::BivariateBeta(b) => query.intersect(&b.support_box()).is_none(),
        }
    }
}

/// Upper bound on the mass a model may hide inside a box for which
/// [`PdfModel::mass_negligible_in`] returned true. At 9 sigma the 2-D
/// Gaussian tail is exp(-40.5) ~ 2.6e-18.
pub const TAIL_MASS_BOUND: f64 = 1e-15;

impl PdfModel {
    /// Characteristic per-axis length scales of the density's variation,
    /// used to size interval-enclosure tiles.
    pub fn length_scales(&self) -> Vector2<f64> {
        match self {
            PdfModel::Gaussian(g) => {
                Vector2::new(g.cov[(0, 0)].sqrt(), g.cov[(1, 1)].sqrt())
            }
            PdfModel::GaussianMixture(m) => m.components.iter().fold(
                Vector2::repeat(f64::INFINITY),
                |acc, g| {
                    acc.inf(&Vector2::new(g.cov[(0, 0)].sqrt(), g.cov[(1, 1)].sqrt()))
                },
            ),
            PdfModel::BivariateBeta(b) => {
                let [a, bb, c, d] = b.shapes;
                let var = |p: f64, q: f64| p * q / ((p + q) * (p + q) * (p + q + 1.0));
                let s = b.support_hi - b.support_lo;
                Vector2::new(var(a, bb).sqrt() * s.x, var(c, d).sqrt() * s.y)
            }
        }
    }
}

fn gaussian_far(g: &Gaussian, query: &Box2) -> bool {
    let closest = Vector2::new(
        g.mean.x.clamp(query.lo.x, query.hi.x),
        g.mean.y.clamp(query.lo.y, query.hi.y),
    );
    let r2 = (closest - g.mean).norm_squared();
    r2 >= 81.0 * g.max_eigenvalue()
}

fn sample_gaussian(g: &Gaussian, rng: &mut impl Rng) -> Vector2<f64> {
    let z = Vector2::new(
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
    );
    g.mean + g.chol * z
}

fn sym2(xx: f64, xy: f64, yy: f64) -> Matrix2<f64> {
    Matrix2::new(xx, xy, xy, yy)
}

fn iv_sym2(xx: Iv, xy: Iv, yy: Iv) -> Interval2x2 {
    Interval2x2::from_entries([[xx, xy], [xy, yy]])
}

/// Hessian entries of a Gaussian, shared by exact and interval paths.
fn gaussian_hessian<N: Scalar, R>(g: &Gaussian, w: [N; 2], pack: impl Fn(N, N, N) -> R) -> R {
    let e = g.eval(w);
    let p = &g.precision;
    let xx = e.f * (e.g[0] * e.g[0] - N::of(p[(0, 0)]));
    let xy = e.f * (e.g[0] * e.g[1] - N::of(p[(0, 1)]));
    let yy = e.f * (e.g[1] * e.g[1] - N::of(p[(1, 1)]));
    pack(xx, xy, yy)
}

/// Per-(obstacle, time-interval) density handles plus the shared obstacle
/// footprint generator matrix.
#[derive(Debug, Clone)]
pub struct ObstacleField {
    /// `pdfs[i][j]` is the density of obstacle i's center during interval j.
    pub pdfs: Vec<Vec<PdfModel>>,
    /// Columns of Gobs, shared across obstacles and intervals.
    pub obstacle_generators: Vec<Vector2<f64>>,
}

impl ObstacleField {
    pub fn new(
        pdfs: Vec<Vec<PdfModel>>,
        obstacle_generators: Vec<Vector2<f64>>,
    ) -> Result<Self, PdfError> {
        if let Some(first) = pdfs.first() {
            if pdfs.iter().any(|row| row.len() != first.len()) {
                return Err(PdfError::RaggedField);
            }
        }
        Ok(Self { pdfs, obstacle_generators })
    }

    pub fn n_obstacles(&self) -> usize {
        self.pdfs.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.pdfs.first().map_or(0, Vec::len)
    }

    pub fn pdf(&self, i: usize, j: usize) -> &PdfModel {
        &self.pdfs[i][j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_gaussian(rng: &mut StdRng) -> Gaussian {
        let mean = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        let r = Matrix2::new(c, -s, s, c);
        let d = Matrix2::new(
            rng.random_range(0.2f64..2.0).powi(2),
            0.0,
            0.0,
            rng.random_range(0.2f64..2.0).powi(2),
        );
        Gaussian::new(mean, r * d * r.transpose()).unwrap()
    }

    fn random_beta(rng: &mut StdRng) -> BivariateBeta {
        let shapes = [
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..6.0),
        ];
        let lo = Vector2::new(rng.random_range(-4.0..0.0), rng.random_range(-4.0..0.0));
        let hi = lo + Vector2::new(rng.random_range(2.0..6.0), rng.random_range(2.0..6.0));
        BivariateBeta::new(shapes, rng.random_range(-0.8..0.8), lo, hi).unwrap()
    }

    fn random_mixture(rng: &mut StdRng) -> Mixture {
        let n = rng.random_range(2..4);
        let comps: Vec<Gaussian> = (0..n).map(|_| random_gaussian(rng)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        Mixture::new(weights, comps).unwrap()
    }

    fn all_kinds(rng: &mut StdRng) -> Vec<PdfModel> {
        vec![
            PdfModel::Gaussian(random_gaussian(rng)),
            PdfModel::GaussianMixture(random_mixture(rng)),
            PdfModel::BivariateBeta(random_beta(rng)),
        ]
    }

    #[test]
    fn standard_gaussian_peak() {
        let m = PdfModel::Gaussian(Gaussian::standard());
        assert_relative_eq!(m.value(Vector2::zeros()), 1.0 / (2.0 * std::f64::consts::PI));
        assert_eq!(m.grad(Vector2::zeros()), Vector2::zeros());
        let h = m.hessian(Vector2::zeros());
        let expected = -1.0 / (2.0 * std::f64::consts::PI);
        assert_relative_eq!(h[(0, 0)], expected);
        assert_relative_eq!(h[(1, 1)], expected);
        assert_relative_eq!(h[(0, 1)], 0.0);
    }

    #[test]
    fn mixture_far_tail_is_negligible() {
        let mut rng = StdRng::seed_from_u64(1);
        let m = PdfModel::GaussianMixture(random_mixture(&mut rng));
        // 12+ sigma from every component mean.
        let far = m.mean() + Vector2::new(200.0, 200.0);
        assert!(m.value(far) < 1e-20);
    }

    #[test]
    fn log_density_consistency() {
        // d/dw log f = grad f / f must match finite differences of log f.
        let mut rng = StdRng::seed_from_u64(2);
        let g = random_gaussian(&mut rng);
        let m = PdfModel::Gaussian(g);
        let h = 1e-6;
        for _ in 0..20 {
            let w = Vector2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let analytic = m.grad(w) / m.value(w);
            for axis in 0..2 {
                let mut dp = w;
                let mut dm = w;
                dp[axis] += h;
                dm[axis] -= h;
                let fd = (m.value(dp).ln() - m.value(dm).ln()) / (2.0 * h);
                assert_relative_eq!(analytic[axis], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let h = 1e-5;
        for model in all_kinds(&mut rng) {
            let center = model.mean();
            for _ in 0..100 {
                let w = center
                    + Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let g = model.grad(w);
                for axis in 0..2 {
                    let mut dp = w;
                    let mut dm = w;
                    dp[axis] += h;
                    dm[axis] -= h;
                    let fd = (model.value(dp) - model.value(dm)) / (2.0 * h);
                    let scale = g.norm().max(1e-6);
                    assert!(
                        (g[axis] - fd).abs() <= 1e-5 * scale + 1e-10,
                        "grad mismatch: {} vs {fd}",
                        g[axis]
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_and_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(4);
        let h = 1e-4;
        for model in all_kinds(&mut rng) {
            let center = model.mean();
            for _ in 0..100 {
                let w = center
                    + Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                let hess = model.hessian(w);
                assert_eq!(hess[(0, 1)], hess[(1, 0)]);
                let scale = hess.norm().max(1e-6);
                for axis in 0..2 {
                    let mut dp = w;
                    let mut dm = w;
                    dp[axis] += h;
                    dm[axis] -= h;
                    let fd = (model.grad(dp) - model.grad(dm)) / (2.0 * h);
                    for r in 0..2 {
                        assert!(
                            (hess[(r, axis)] - fd[r]).abs() <= 1e-3 * scale + 1e-9,
                            "hessian mismatch at ({r},{axis})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_interval_degenerate_box_is_exact() {
        let mut rng = StdRng::seed_from_u64(5);
        for model in all_kinds(&mut rng) {
            let w = model.mean() + Vector2::new(0.3, -0.2);
            let enc = model.hessian_interval(&Box2::point(w));
            let exact = model.hessian(w);
            assert_relative_eq!(enc.lower, exact, epsilon = 1e-12);
            assert_relative_eq!(enc.upper, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn hessian_interval_soundness_sampling() {
        let mut rng = StdRng::seed_from_u64(6);
        for model in all_kinds(&mut rng) {
            for _ in 0..20 {
                let center = model.mean()
                    + Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let half = Vector2::new(rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
                let bx = Box2::new(center - half, center + half);
                let enc = model.hessian_interval(&bx);
                for _ in 0..500 {
                    let w = Vector2::new(
                        rng.random_range(bx.lo.x..=bx.hi.x),
                        rng.random_range(bx.lo.y..=bx.hi.y),
                    );
                    assert!(enc.contains(&model.hessian(w)), "enclosure violated for {model:?}");
                }
            }
        }
    }

    #[test]
    fn hessian_interval_nesting() {
        let mut rng = StdRng::seed_from_u64(7);
        for model in all_kinds(&mut rng) {
            let c = model.mean();
            let small = model.hessian_interval(&Box2::new(
                c - Vector2::new(0.2, 0.2),
                c + Vector2::new(0.2, 0.2),
            ));
            let big = model.hessian_interval(&Box2::new(
                c - Vector2::new(0.8, 0.8),
                c + Vector2::new(0.8, 0.8),
            ));
            for r in 0..2 {
                for cc in 0..2 {
                    assert!(big.lower[(r, cc)] <= small.lower[(r, cc)] + 1e-15);
                    assert!(big.upper[(r, cc)] >= small.upper[(r, cc)] - 1e-15);
                }
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        // Uniform MC over a box that captures essentially all mass.
        let mut rng = StdRng::seed_from_u64(8);
        for model in all_kinds(&mut rng) {
            let (lo, hi) = match &model {
                PdfModel::BivariateBeta(b) => (b.support_lo, b.support_hi),
                _ => {
                    let m = model.mean();
                    let spread = model.cov().trace().sqrt();
                    let r = 8.0 * spread.max(1.0);
                    (m - Vector2::new(r, r), m + Vector2::new(r, r))
                }
            };
            let area = (hi.x - lo.x) * (hi.y - lo.y);
            let n = 400_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let w = Vector2::new(
                    rng.random_range(lo.x..=hi.x),
                    rng.random_range(lo.y..=hi.y),
                );
                acc += model.value(w);
            }
            let integral = acc * area / n as f64;
            assert!(
                (integral - 1.0).abs() < 0.02,
                "density mass {integral} for {model:?}"
            );
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let mut rng = StdRng::seed_from_u64(9);
        for model in all_kinds(&mut rng) {
            let n = 200_000;
            let mut acc = Vector2::zeros();
            for _ in 0..n {
                acc += model.sample(&mut rng);
            }
            let emp = acc / n as f64;
            let tol = 3.0 * (model.cov().trace() / n as f64).sqrt() + 1e-3;
            assert!((emp - model.mean()).norm() < tol, "mean off for {model:?}");
        }
    }

    #[test]
    fn nonnegative_everywhere_sampled() {
        let mut rng = StdRng::seed_from_u64(10);
        for model in all_kinds(&mut rng) {
            for _ in 0..2000 {
                let w = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                assert!(model.value(w) >= 0.0);
            }
        }
    }

    #[test]
    fn field_shape_checked() {
        let g = PdfModel::Gaussian(Gaussian::standard());
        let ragged = ObstacleField::new(vec![vec![g.clone(), g.clone()], vec![g.clone()]], vec![]);
        assert!(ragged.is_err());
        let ok = ObstacleField::new(vec![vec![g.clone()], vec![g]], vec![]).unwrap();
        assert_eq!(ok.n_obstacles(), 2);
        assert_eq!(ok.n_intervals(), 1);
    }

    #[test]
    fn invalid_constructions_rejected() {
        assert!(Gaussian::new(Vector2::zeros(), Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(BivariateBeta::new([2.0, 3.0, 3.0, 3.0], 0.0, Vector2::zeros(), Vector2::new(1.0, 1.0))
            .is_err());
        assert!(BivariateBeta::new([3.0, 3.0, 3.0, 3.0], 50.0, Vector2::zeros(), Vector2::new(1.0, 1.0))
            .is_err());
        assert!(Mixture::new(vec![1.0], vec![]).is_err());
    }
}
