//! Closed-form over-approximation of the collision chance constraint.
//!
//! For every (obstacle, interval) pair the buffered reach zonotope at p = 0
//! is covered by right triangles. Over each triangle (shifted by `A_j p`
//! during optimization) the density is bounded from above by its second-order
//! Taylor model around the right-angle vertex, with the Hessian replaced by a
//! p-independent element-wise interval supremum over the triangle expanded by
//! `A_j P`. The sign-consistency of the triangle makes the bound one-sided,
//! and the bound's integral over the triangle has a closed form, as does its
//! exact derivative with respect to p (the Hessian supremum is constant over
//! the parameter box).
//!
//! Totals are accumulated in a fixed (i, j, triangle) order so results are
//! bit-identical across thread counts.

use crate::interval::Box2;
use crate::pdf::{ObstacleField, PdfModel, TAIL_MASS_BOUND};
use crate::reach::WorldTube;
use crate::zonotope::{build_cover, RightTriangle, TriangleCover, Zonotope2};
use nalgebra::{DVector, Matrix2, Matrix2xX, Vector2};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("non-finite density evaluation for obstacle {i} interval {j}")]
    NonFinitePdf { i: usize, j: usize },
    #[error("tube has {tube} intervals but obstacle field has {field}")]
    MismatchedIntervals { tube: usize, field: usize },
    #[error("gradient dimension {got} does not match parameter dimension {expect}")]
    BadParamDim { got: usize, expect: usize },
}

/// Per-triangle data that stays fixed while p varies: the Hessian bound
/// `H_S`, the simplex map `A_S = diag(k3/l1, k3/l2)` and
/// `H_hat = A_S^{-T} H_S A_S^{-1}`.
#[derive(Debug, Clone)]
pub struct TriangleRelaxation {
    pub triangle: RightTriangle,
    pub h_bound: Matrix2<f64>,
    pub a_s: Matrix2<f64>,
    pub h_hat: Matrix2<f64>,
    pub det_a_s: f64,
}

impl TriangleRelaxation {
    pub fn new(triangle: RightTriangle, h_bound: Matrix2<f64>) -> Self {
        let k3 = triangle.orient as f64;
        let (l1, l2) = triangle.legs;
        let a_s = Matrix2::new(k3 / l1, 0.0, 0.0, k3 / l2);
        let a_s_inv = Matrix2::new(k3 * l1, 0.0, 0.0, k3 * l2);
        let h_hat = a_s_inv.transpose() * h_bound * a_s_inv;
        Self { triangle, h_bound, a_s, h_hat, det_a_s: 1.0 / (l1 * l2) }
    }

    /// Supremum-based relaxation: sound upper bound of the density over the
    /// triangle expanded by the parameter shift hull.
    pub fn upper(triangle: RightTriangle, model: &PdfModel, shift_hull: &ShiftHull) -> Self {
        let bx = shift_hull.expand_triangle(&triangle);
        Self::new(triangle, tiled_hessian_enclosure(model, &bx).upper)
    }

    /// Infimum-based variant: flips the inequality, yielding a diagnostic
    /// under-approximation. Never used in the planner's constraint.
    pub fn lower(triangle: RightTriangle, model: &PdfModel, shift_hull: &ShiftHull) -> Self {
        let bx = shift_hull.expand_triangle(&triangle);
        Self::new(triangle, tiled_hessian_enclosure(model, &bx).lower)
    }
}

/// Hessian enclosure with the box subdivided into density-length-scale tiles
/// before interval evaluation. The hull of per-tile enclosures still bounds
/// the Hessian over the whole box, but with far less dependency slack when
/// the parameter hull makes the box span several sigma.
fn tiled_hessian_enclosure(model: &PdfModel, bx: &Box2) -> crate::interval::Interval2x2 {
    let scales = model.length_scales();
    let tiles = |width: f64, scale: f64| -> usize {
        if !(scale.is_finite() && scale > 0.0) {
            return 1;
        }
        ((width / (0.7 * scale)).ceil() as usize).clamp(1, 6)
    };
    let nx = tiles(bx.hi.x - bx.lo.x, scales.x);
    let ny = tiles(bx.hi.y - bx.lo.y, scales.y);
    if nx == 1 && ny == 1 {
        return model.hessian_interval(bx);
    }
    let dx = (bx.hi.x - bx.lo.x) / nx as f64;
    let dy = (bx.hi.y - bx.lo.y) / ny as f64;
    let mut out: Option<crate::interval::Interval2x2> = None;
    for ix in 0..nx {
        for iy in 0..ny {
            let lo = Vector2::new(bx.lo.x + ix as f64 * dx, bx.lo.y + iy as f64 * dy);
            let hi = Vector2::new(lo.x + dx, lo.y + dy);
            let enc = model.hessian_interval(&Box2::new(lo, hi));
            out = Some(match out {
                None => enc,
                Some(acc) => acc.hull(&enc),
            });
        }
    }
    out.expect("at least one tile")
}

/// Interval hull of `A_j p` over the parameter box, used to expand triangle
/// boxes before Hessian enclosure.
#[derive(Debug, Clone, Copy)]
pub struct ShiftHull {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

impl ShiftHull {
    pub fn new(a: &Matrix2xX<f64>, p_lo: &DVector<f64>, p_hi: &DVector<f64>) -> Self {
        let center = 0.5 * (p_lo + p_hi);
        let half = 0.5 * (p_hi - p_lo);
        let mut lo = Vector2::zeros();
        let mut hi = Vector2::zeros();
        for row in 0..2 {
            let mut c = 0.0;
            let mut h = 0.0;
            for k in 0..a.ncols() {
                c += a[(row, k)] * center[k];
                h += a[(row, k)].abs() * half[k];
            }
            lo[row] = c - h;
            hi[row] = c + h;
        }
        Self { lo, hi }
    }

    pub fn zero() -> Self {
        Self { lo: Vector2::zeros(), hi: Vector2::zeros() }
    }

    fn expand_triangle(&self, t: &RightTriangle) -> Box2 {
        let (lo, hi) = t.bounding_box();
        Box2::new(lo + self.lo, hi + self.hi)
    }

    fn expand_zonotope(&self, z: &Zonotope2) -> Box2 {
        let (lo, hi) = z.bounding_box();
        Box2::new(lo + self.lo, hi + self.hi)
    }
}

/// Exact integral over the (shifted) triangle of the quadratic model
/// `f0 + grad . (w - wc) + 1/2 (w - wc)' H (w - wc)` where `H` is the
/// relaxation's Hessian bound and `f0`, `grad` are the density and gradient
/// at the shifted anchor.
///
/// Derivation: the affine map `A_S (w - wc)` sends the triangle to the
/// canonical simplex, over which the monomial integrals are
/// `area = 1/2`, `int a = int b = 1/6`, `int a^2 = int b^2 = 1/12`,
/// `int ab = 1/24`.
pub fn simplex_bound_integral(f0: f64, grad: Vector2<f64>, rel: &TriangleRelaxation) -> f64 {
    let hh = &rel.h_hat;
    let quad = (2.0 * hh[(0, 0)] + hh[(0, 1)] + hh[(1, 0)] + 2.0 * hh[(1, 1)]) / 24.0;
    let k3 = rel.triangle.orient as f64;
    let (l1, l2) = rel.triangle.legs;
    let lin = k3 * (grad.x * l1 + grad.y * l2) / 3.0;
    (f0 + quad + lin) / (2.0 * rel.det_a_s)
}

/// Exact p-gradient of [`simplex_bound_integral`] with the density evaluated
/// at `wc + A_j p`: the Hessian bound is constant over the parameter box, so
/// only the anchor evaluation moves with p.
pub fn simplex_bound_gradient(
    grad: Vector2<f64>,
    hess: &Matrix2<f64>,
    rel: &TriangleRelaxation,
    a_j: &Matrix2xX<f64>,
) -> DVector<f64> {
    let k3 = rel.triangle.orient as f64;
    let (l1, l2) = rel.triangle.legs;
    // row vector grad' + (k3/3) [l1, l2] H, then right-multiplied by A_j
    let lead = Vector2::new(
        grad.x + k3 / 3.0 * (l1 * hess[(0, 0)] + l2 * hess[(1, 0)]),
        grad.y + k3 / 3.0 * (l1 * hess[(0, 1)] + l2 * hess[(1, 1)]),
    );
    let mut out = DVector::zeros(a_j.ncols());
    for k in 0..a_j.ncols() {
        out[k] = (lead.x * a_j[(0, k)] + lead.y * a_j[(1, k)]) / (2.0 * rel.det_a_s);
    }
    out
}

/// Closed-form over-approximation of the density integral over
/// `triangle + A_j p`.
pub fn integrate_relaxed(
    rel: &TriangleRelaxation,
    model: &PdfModel,
    a_j: &Matrix2xX<f64>,
    p: &DVector<f64>,
) -> Result<f64, RiskError> {
    let shift = a_j * p;
    let anchor = rel.triangle.anchor + Vector2::new(shift[0], shift[1]);
    let f0 = model.value(anchor);
    if !f0.is_finite() {
        return Err(RiskError::NonFinitePdf { i: 0, j: 0 });
    }
    Ok(simplex_bound_integral(f0, model.grad(anchor), rel))
}

/// p-gradient of [`integrate_relaxed`].
pub fn integrate_relaxed_grad(
    rel: &TriangleRelaxation,
    model: &PdfModel,
    a_j: &Matrix2xX<f64>,
    p: &DVector<f64>,
) -> Result<DVector<f64>, RiskError> {
    let shift = a_j * p;
    let anchor = rel.triangle.anchor + Vector2::new(shift[0], shift[1]);
    let grad = model.grad(anchor);
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(RiskError::NonFinitePdf { i: 0, j: 0 });
    }
    Ok(simplex_bound_gradient(grad, &model.hessian(anchor), rel, a_j))
}

/// Aggregated risk value, per-pair breakdown and gradient.
#[derive(Debug, Clone)]
pub struct RiskReport {
    /// Over-approximation of the summed collision probability (clamped at 0).
    pub total: f64,
    /// Diagnostic under-approximation from the infimum relaxation.
    pub total_lower: f64,
    /// Per (obstacle, interval) over-approximations, in (i, j) order.
    pub per_pair: Vec<((usize, usize), f64)>,
    pub gradient: DVector<f64>,
    pub triangle_count: usize,
    /// Per-triangle closed-form values that came out negative (possible when
    /// the quadratic bound dips below zero away from the anchor).
    pub negative_terms: usize,
    /// (obstacle, interval) pairs skipped by the tail bound; each contributes
    /// `TAIL_MASS_BOUND` to the total to keep it an over-approximation.
    pub skipped_pairs: usize,
    pub wall_time: f64,
}

struct WorkItem {
    i: usize,
    j: usize,
    upper: TriangleRelaxation,
    lower: TriangleRelaxation,
}

/// Prebuilt covers and relaxations for one planning cycle.
///
/// Building is the expensive part (interval Hessians per triangle); once
/// built, [`RiskEvaluator::eval`] is cheap and exact in p, and the Hessian
/// bounds remain valid for every p in the tube's parameter box.
pub struct RiskEvaluator<'a> {
    field: &'a ObstacleField,
    tube: &'a WorldTube,
    pub covers: Vec<TriangleCover>,
    items: Vec<WorkItem>,
    skipped: usize,
    n_p: usize,
}

impl<'a> RiskEvaluator<'a> {
    pub fn new(
        tube: &'a WorldTube,
        field: &'a ObstacleField,
        grid_k: usize,
    ) -> Result<Self, RiskError> {
        if field.n_obstacles() > 0 && field.n_intervals() != tube.n_intervals() {
            return Err(RiskError::MismatchedIntervals {
                tube: tube.n_intervals(),
                field: field.n_intervals(),
            });
        }
        let n_p = tube.intervals.first().map_or(2, |iv| iv.a.ncols());
        let p_lo = DVector::from_column_slice(&[tube.p_box.lo.x, tube.p_box.lo.y]);
        let p_hi = DVector::from_column_slice(&[tube.p_box.hi.x, tube.p_box.hi.y]);

        let covers: Vec<TriangleCover> = (0..tube.n_intervals())
            .into_par_iter()
            .map(|j| {
                let buffered = tube.buffered_zero(j, &field.obstacle_generators);
                build_cover(&buffered, grid_k).expect("grid_k >= 1")
            })
            .collect();

        // Fixed (i, j) order; per pair either a tail skip or one work item
        // per triangle.
        let mut pair_specs = Vec::new();
        let mut skipped = 0usize;
        for i in 0..field.n_obstacles() {
            for j in 0..tube.n_intervals() {
                let hull = ShiftHull::new(&tube.intervals[j].a, &p_lo, &p_hi);
                let query = hull.expand_zonotope(&covers[j].source_zonotope);
                if field.pdf(i, j).mass_negligible_in(&query) {
                    skipped += 1;
                } else {
                    pair_specs.push((i, j, hull));
                }
            }
        }

        let items: Vec<WorkItem> = pair_specs
            .par_iter()
            .flat_map_iter(|&(i, j, hull)| {
                let model = field.pdf(i, j);
                covers[j].triangles.iter().map(move |t| WorkItem {
                    i,
                    j,
                    upper: TriangleRelaxation::upper(*t, model, &hull),
                    lower: TriangleRelaxation::lower(*t, model, &hull),
                })
            })
            .collect();

        Ok(Self { field, tube, covers, items, skipped, n_p })
    }

    pub fn triangle_count(&self) -> usize {
        self.items.len()
    }

    /// Constraint value and gradient at p. Deterministic: per-item results
    /// are reduced in construction order regardless of thread count.
    pub fn eval(&self, p: &DVector<f64>) -> Result<(f64, DVector<f64>), RiskError> {
        if p.len() != self.n_p {
            return Err(RiskError::BadParamDim { got: p.len(), expect: self.n_p });
        }
        let per_item: Vec<(f64, DVector<f64>)> = self
            .items
            .par_iter()
            .map(|item| {
                let a_j = &self.tube.intervals[item.j].a;
                let model = self.field.pdf(item.i, item.j);
                let shift = a_j * p;
                let anchor = item.upper.triangle.anchor + Vector2::new(shift[0], shift[1]);
                let f0 = model.value(anchor);
                let grad = model.grad(anchor);
                if !f0.is_finite() {
                    return Err(RiskError::NonFinitePdf { i: item.i, j: item.j });
                }
                let value = simplex_bound_integral(f0, grad, &item.upper);
                let g = simplex_bound_gradient(grad, &model.hessian(anchor), &item.upper, a_j);
                Ok((value, g))
            })
            .collect::<Result<_, RiskError>>()?;

        let mut total = self.skipped as f64 * TAIL_MASS_BOUND;
        let mut gradient = DVector::zeros(self.n_p);
        for (v, g) in &per_item {
            total += v;
            gradient += g;
        }
        Ok((total.max(0.0), gradient))
    }

    /// Full report including the under-approximation variant and per-pair
    /// breakdown.
    pub fn eval_report(&self, p: &DVector<f64>) -> Result<RiskReport, RiskError> {
        let t0 = std::time::Instant::now();
        if p.len() != self.n_p {
            return Err(RiskError::BadParamDim { got: p.len(), expect: self.n_p });
        }
        let per_item: Vec<(f64, f64, DVector<f64>)> = self
            .items
            .par_iter()
            .map(|item| {
                let a_j = &self.tube.intervals[item.j].a;
                let model = self.field.pdf(item.i, item.j);
                let shift = a_j * p;
                let anchor = item.upper.triangle.anchor + Vector2::new(shift[0], shift[1]);
                let f0 = model.value(anchor);
                let grad = model.grad(anchor);
                if !f0.is_finite() {
                    return Err(RiskError::NonFinitePdf { i: item.i, j: item.j });
                }
                let value = simplex_bound_integral(f0, grad, &item.upper);
                let low = simplex_bound_integral(f0, grad, &item.lower);
                let g = simplex_bound_gradient(grad, &model.hessian(anchor), &item.upper, a_j);
                Ok((value, low, g))
            })
            .collect::<Result<_, RiskError>>()?;

        let allowance = self.skipped as f64 * TAIL_MASS_BOUND;
        let mut total = allowance;
        let mut total_lower = 0.0;
        let mut gradient = DVector::zeros(self.n_p);
        let mut negative_terms = 0usize;
        let mut per_pair: Vec<((usize, usize), f64)> = Vec::new();
        for (item, (v, low, g)) in self.items.iter().zip(&per_item) {
            total += v;
            total_lower += low;
            gradient += g;
            if *v < 0.0 {
                negative_terms += 1;
            }
            match per_pair.last_mut() {
                Some((key, acc)) if *key == (item.i, item.j) => *acc += v,
                _ => per_pair.push(((item.i, item.j), *v)),
            }
        }
        Ok(RiskReport {
            total: total.max(0.0),
            total_lower: total_lower.max(0.0),
            per_pair,
            gradient,
            triangle_count: self.items.len(),
            negative_terms,
            skipped_pairs: self.skipped,
            wall_time: t0.elapsed().as_secs_f64(),
        })
    }
}

impl RiskEvaluator<'_> {
    /// Certificate at a specific parameter: the same closed-form bound with
    /// the Hessian supremum taken over the covers shifted by exactly `A_j p`
    /// instead of the whole parameter box. Valid for that parameter alone,
    /// and much tighter when the box moves the reach sets far.
    pub fn point_certificate(&self, p: &DVector<f64>) -> Result<f64, RiskError> {
        if p.len() != self.n_p {
            return Err(RiskError::BadParamDim { got: p.len(), expect: self.n_p });
        }
        let mut pair_specs = Vec::new();
        for i in 0..self.field.n_obstacles() {
            for j in 0..self.tube.n_intervals() {
                let shift = &self.tube.intervals[j].a * p;
                let hull = ShiftHull {
                    lo: Vector2::new(shift[0], shift[1]),
                    hi: Vector2::new(shift[0], shift[1]),
                };
                let query = hull.expand_zonotope(&self.covers[j].source_zonotope);
                if !self.field.pdf(i, j).mass_negligible_in(&query) {
                    pair_specs.push((i, j, hull));
                }
            }
        }
        let skipped =
            self.field.n_obstacles() * self.tube.n_intervals() - pair_specs.len();
        let per_pair: Vec<f64> = pair_specs
            .par_iter()
            .map(|&(i, j, hull)| {
                let model = self.field.pdf(i, j);
                let a_j = &self.tube.intervals[j].a;
                let mut acc = 0.0;
                for t in &self.covers[j].triangles {
                    let rel = TriangleRelaxation::upper(*t, model, &hull);
                    acc += integrate_relaxed(&rel, model, a_j, p)?;
                }
                Ok(acc)
            })
            .collect::<Result<_, RiskError>>()?;
        let total = skipped as f64 * TAIL_MASS_BOUND + per_pair.iter().sum::<f64>();
        Ok(total.max(0.0))
    }
}

/// One-shot evaluation: build covers and relaxations for `tube` against
/// `field` and evaluate at `p`.
pub fn risk_and_grad(
    tube: &WorldTube,
    field: &ObstacleField,
    p: &DVector<f64>,
    grid_k: usize,
) -> Result<RiskReport, RiskError> {
    let t0 = std::time::Instant::now();
    let eval = RiskEvaluator::new(tube, field, grid_k)?;
    let mut report = eval.eval_report(p)?;
    report.wall_time = t0.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdf::Gaussian;
    use crate::reach::{ParamBox, WorldInterval};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tri(anchor: (f64, f64), legs: (f64, f64), orient: i8) -> RightTriangle {
        RightTriangle {
            anchor: Vector2::new(anchor.0, anchor.1),
            legs,
            orient,
            cell_index: (1, 1),
        }
    }

    #[test]
    fn constant_integrand_gives_area_times_value() {
        // f == c: zero gradient and Hessian bound.
        let rel = TriangleRelaxation::new(tri((0.0, 0.0), (1.0, 1.0), 1), Matrix2::zeros());
        let c = 0.37;
        assert_relative_eq!(simplex_bound_integral(c, Vector2::zeros(), &rel), c / 2.0);
        // Upper-orientation triangle has the same area.
        let rel_u = TriangleRelaxation::new(tri((1.0, 1.0), (1.0, 1.0), -1), Matrix2::zeros());
        assert_relative_eq!(simplex_bound_integral(c, Vector2::zeros(), &rel_u), c / 2.0);
    }

    #[test]
    fn linear_integrand_over_canonical_simplex() {
        // f(w) = w_1 with anchor at the origin: f0 = 0, grad = (1, 0).
        let rel = TriangleRelaxation::new(tri((0.0, 0.0), (1.0, 1.0), 1), Matrix2::zeros());
        let v = simplex_bound_integral(0.0, Vector2::new(1.0, 0.0), &rel);
        assert_relative_eq!(v, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_integrand_matches_monomial_integrals() {
        // H = [[2, 0], [0, 0]] makes the model w_1^2 over the canonical
        // simplex; its exact integral is 1/12.
        let h = Matrix2::new(2.0, 0.0, 0.0, 0.0);
        let rel = TriangleRelaxation::new(tri((0.0, 0.0), (1.0, 1.0), 1), h);
        let v = simplex_bound_integral(0.0, Vector2::zeros(), &rel);
        assert_relative_eq!(v, 1.0 / 12.0, epsilon = 1e-15);
        // Cross term: model w_1 w_2, integral 1/24.
        let h = Matrix2::new(0.0, 1.0, 1.0, 0.0);
        let rel = TriangleRelaxation::new(tri((0.0, 0.0), (1.0, 1.0), 1), h);
        let v = simplex_bound_integral(0.0, Vector2::zeros(), &rel);
        assert_relative_eq!(v, 1.0 / 24.0, epsilon = 1e-15);
    }

    #[test]
    fn det_a_s_is_inverse_leg_product() {
        for orient in [1i8, -1] {
            let rel =
                TriangleRelaxation::new(tri((0.3, -0.7), (0.25, 0.5), orient), Matrix2::zeros());
            assert_relative_eq!(rel.det_a_s, 1.0 / (0.25 * 0.5));
            assert_relative_eq!(rel.a_s.determinant(), rel.det_a_s);
        }
    }

    fn single_interval_tube(a: Matrix2xX<f64>, center: Vector2<f64>) -> WorldTube {
        WorldTube {
            family: crate::vehicle::FamilyKind::LaneChange,
            p_box: ParamBox::new(Vector2::new(-1.0, -1.0), Vector2::new(1.0, 1.0)),
            dt: 0.5,
            t_m: 6.0,
            t_f: 10.5,
            intervals: vec![WorldInterval {
                center,
                a,
                generators: vec![Vector2::new(2.0, 0.0), Vector2::new(0.0, 1.0)],
            }],
        }
    }

    fn field_with(model: PdfModel) -> ObstacleField {
        ObstacleField::new(
            vec![vec![model]],
            vec![Vector2::new(0.5, 0.0), Vector2::new(0.0, 0.5)],
        )
        .unwrap()
    }

    #[test]
    fn gradient_zero_when_parameter_has_no_effect() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let rel = TriangleRelaxation::new(tri((0.2, 0.1), (0.5, 0.5), 1), Matrix2::zeros());
        let a_j = Matrix2xX::zeros(2);
        let p = DVector::from_column_slice(&[0.3, -0.4]);
        let g = integrate_relaxed_grad(&rel, &model, &a_j, &p).unwrap();
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(21);
        let model = PdfModel::Gaussian(
            Gaussian::new(Vector2::new(0.4, -0.2), Matrix2::new(1.3, 0.4, 0.4, 0.9)).unwrap(),
        );
        for _ in 0..100 {
            let t = tri(
                (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)),
                if rng.random_bool(0.5) { 1 } else { -1 },
            );
            let a_j = Matrix2xX::from_row_slice(&[
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ]);
            let hull = ShiftHull::new(
                &a_j,
                &DVector::from_column_slice(&[-1.0, -1.0]),
                &DVector::from_column_slice(&[1.0, 1.0]),
            );
            let rel = TriangleRelaxation::upper(t, &model, &hull);
            let p = DVector::from_column_slice(&[
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
            ]);
            let g = integrate_relaxed_grad(&rel, &model, &a_j, &p).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[k] += h;
                pm[k] -= h;
                let fd = (integrate_relaxed(&rel, &model, &a_j, &pp).unwrap()
                    - integrate_relaxed(&rel, &model, &a_j, &pm).unwrap())
                    / (2.0 * h);
                let scale = g[k].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (g[k] - fd).abs() <= 1e-6 * scale + 1e-12,
                    "component {k}: {} vs {}",
                    g[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn gradient_at_mode_is_pure_hessian_term() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let t = tri((-0.3, -0.4), (0.4, 0.4), 1);
        let a_j = Matrix2xX::from_row_slice(&[1.0, 0.0, 0.0, 1.0]);
        // p chosen so the shifted anchor lands exactly at the mean.
        let p = DVector::from_column_slice(&[0.3, 0.4]);
        let rel = TriangleRelaxation::new(t, Matrix2::zeros());
        let g = integrate_relaxed_grad(&rel, &model, &a_j, &p).unwrap();
        let hess = model.hessian(Vector2::zeros());
        let expect = simplex_bound_gradient(Vector2::zeros(), &hess, &rel, &a_j);
        assert_relative_eq!(g, expect, epsilon = 1e-14);
    }

    #[test]
    fn lower_variant_never_exceeds_upper() {
        let mut rng = StdRng::seed_from_u64(5);
        let model = PdfModel::Gaussian(Gaussian::standard());
        for _ in 0..200 {
            let t = tri(
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                (rng.random_range(0.05..1.5), rng.random_range(0.05..1.5)),
                if rng.random_bool(0.5) { 1 } else { -1 },
            );
            let hull = ShiftHull::zero();
            let up = TriangleRelaxation::upper(t, &model, &hull);
            let lo = TriangleRelaxation::lower(t, &model, &hull);
            let p = DVector::zeros(2);
            let a_j = Matrix2xX::zeros(2);
            let vu = integrate_relaxed(&up, &model, &a_j, &p).unwrap();
            let vl = integrate_relaxed(&lo, &model, &a_j, &p).unwrap();
            assert!(vl <= vu + 1e-15, "lower {vl} above upper {vu}");
        }
    }

    #[test]
    fn point_box_makes_lower_equal_upper() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        // Tiny triangle: the enclosure degenerates to the pointwise Hessian.
        let t = tri((0.1, 0.2), (1e-9, 1e-9), 1);
        let up = TriangleRelaxation::upper(t, &model, &ShiftHull::zero());
        let lo = TriangleRelaxation::lower(t, &model, &ShiftHull::zero());
        assert_relative_eq!(up.h_bound, lo.h_bound, epsilon = 1e-9);
    }

    #[test]
    fn far_obstacle_total_is_negligible() {
        let model = PdfModel::Gaussian(
            Gaussian::new(Vector2::new(500.0, 500.0), Matrix2::identity()).unwrap(),
        );
        let tube =
            single_interval_tube(Matrix2xX::from_row_slice(&[1.0, 0.0, 0.0, 1.0]), Vector2::zeros());
        let field = field_with(model);
        let report = risk_and_grad(&tube, &field, &DVector::zeros(2), 12).unwrap();
        assert!(report.total < 1e-12, "total {}", report.total);
        assert!(report.gradient.norm() < 1e-10);
        assert_eq!(report.skipped_pairs, 1);
    }

    #[test]
    fn total_is_sum_of_triangle_integrals() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let tube = single_interval_tube(
            Matrix2xX::from_row_slice(&[0.4, 0.0, 0.0, 0.4]),
            Vector2::new(0.5, -0.3),
        );
        let field = field_with(model.clone());
        let p = DVector::from_column_slice(&[0.2, -0.6]);
        let k = 8;
        let report = risk_and_grad(&tube, &field, &p, k).unwrap();

        let eval = RiskEvaluator::new(&tube, &field, k).unwrap();
        let cover = &eval.covers[0];
        let p_lo = DVector::from_column_slice(&[-1.0, -1.0]);
        let p_hi = DVector::from_column_slice(&[1.0, 1.0]);
        let hull = ShiftHull::new(&tube.intervals[0].a, &p_lo, &p_hi);
        let mut manual = 0.0;
        for t in &cover.triangles {
            let rel = TriangleRelaxation::upper(*t, &model, &hull);
            manual += integrate_relaxed(&rel, &model, &tube.intervals[0].a, &p).unwrap();
        }
        // The only pair is evaluated, so total = manual sum + tail allowance 0.
        assert_relative_eq!(report.total, manual.max(0.0), epsilon = 1e-12);
        assert_eq!(report.per_pair.len(), 1);
        assert_relative_eq!(report.per_pair[0].1, manual, epsilon = 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let tube = single_interval_tube(
            Matrix2xX::from_row_slice(&[0.4, 0.1, -0.1, 0.4]),
            Vector2::new(0.8, 0.2),
        );
        let field = field_with(model);
        let p = DVector::from_column_slice(&[0.3, 0.3]);
        let a = risk_and_grad(&tube, &field, &p, 24).unwrap();
        let b = risk_and_grad(&tube, &field, &p, 24).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.total_lower, b.total_lower);
    }

    #[test]
    fn mismatched_intervals_rejected() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let tube = single_interval_tube(Matrix2xX::zeros(2), Vector2::zeros());
        let field = ObstacleField::new(vec![vec![model.clone(), model]], vec![]).unwrap();
        assert!(matches!(
            RiskEvaluator::new(&tube, &field, 8),
            Err(RiskError::MismatchedIntervals { .. })
        ));
    }

    #[test]
    fn refinement_tightens_total() {
        let model = PdfModel::Gaussian(Gaussian::standard());
        let tube = single_interval_tube(
            Matrix2xX::from_row_slice(&[0.4, 0.0, 0.0, 0.4]),
            Vector2::new(0.4, 0.1),
        );
        let field = field_with(model);
        let p = DVector::from_column_slice(&[0.1, 0.2]);
        let t12 = risk_and_grad(&tube, &field, &p, 12).unwrap().total;
        let t24 = risk_and_grad(&tube, &field, &p, 24).unwrap().total;
        let t48 = risk_and_grad(&tube, &field, &p, 48).unwrap().total;
        assert!(t24 <= t12 + 1e-12, "k=24 {t24} vs k=12 {t12}");
        assert!(t48 <= t24 + 1e-12, "k=48 {t48} vs k=24 {t24}");
    }
}
