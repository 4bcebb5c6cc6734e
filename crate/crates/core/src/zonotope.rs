//! Planar zonotope algebra, right-triangle primitives and grid covers.
//!
//! A zonotope is stored as a center plus a list of generator columns. All
//! routines here are pure; values are freely shareable across threads.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

/// Absolute containment / intersection tolerance in meters. Ties are resolved
/// conservatively (toward inclusion) so covers stay sound.
pub const TOL_IN: f64 = 1e-9;

/// Generators shorter than this are dropped during vertex enumeration.
const GEN_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("grid size k must be at least 1")]
    ZeroGrid,
}

/// Planar zonotope `{ c + sum_k beta_k g_k | beta_k in [-1, 1] }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope2 {
    pub center: Vector2<f64>,
    pub generators: Vec<Vector2<f64>>,
}

impl Zonotope2 {
    pub fn new(center: Vector2<f64>, generators: Vec<Vector2<f64>>) -> Self {
        Self { center, generators }
    }

    /// A single point (no generators).
    pub fn point(center: Vector2<f64>) -> Self {
        Self { center, generators: Vec::new() }
    }

    /// Axis-aligned box with the given half-widths.
    pub fn aabb(center: Vector2<f64>, half_widths: Vector2<f64>) -> Self {
        Self {
            center,
            generators: vec![
                Vector2::new(half_widths.x, 0.0),
                Vector2::new(0.0, half_widths.y),
            ],
        }
    }

    /// Minkowski sum: centers add, generator columns concatenate.
    pub fn minkowski_sum(&self, other: &Zonotope2) -> Zonotope2 {
        let mut generators = self.generators.clone();
        generators.extend_from_slice(&other.generators);
        Zonotope2 { center: self.center + other.center, generators }
    }

    /// Image under a linear map: `A Z = <A c, A G>`.
    pub fn linear_map(&self, a: &Matrix2<f64>) -> Zonotope2 {
        Zonotope2 {
            center: a * self.center,
            generators: self.generators.iter().map(|g| a * g).collect(),
        }
    }

    /// Translate by `t`.
    pub fn translate(&self, t: Vector2<f64>) -> Zonotope2 {
        Zonotope2 { center: self.center + t, generators: self.generators.clone() }
    }

    /// Support value `max { a . x | x in Z } = a.c + sum |a.g_k|`.
    pub fn support(&self, dir: Vector2<f64>) -> f64 {
        self.center.dot(&dir) + self.generators.iter().map(|g| g.dot(&dir).abs()).sum::<f64>()
    }

    /// Tight axis-aligned bounding box as (lower, upper) corners.
    pub fn bounding_box(&self) -> (Vector2<f64>, Vector2<f64>) {
        let hw: Vector2<f64> = self
            .generators
            .iter()
            .fold(Vector2::zeros(), |acc, g| acc + Vector2::new(g.x.abs(), g.y.abs()));
        (self.center - hw, self.center + hw)
    }

    /// True iff `w = c + G beta` for some `beta in [-1,1]^l`, up to `TOL_IN`.
    ///
    /// Full-rank zonotopes use the half-space representation (edge normals are
    /// the generator perpendiculars); degenerate ones fall back to
    /// point/segment tests with the same tolerance.
    pub fn contains_point(&self, w: Vector2<f64>) -> bool {
        let gens: Vec<Vector2<f64>> =
            self.generators.iter().copied().filter(|g| g.norm() > GEN_EPS).collect();
        let d = w - self.center;
        if gens.is_empty() {
            return d.norm() <= TOL_IN;
        }
        // Half-space test over every generator direction. For rank-2
        // zonotopes these normals describe all edges; for rank-1 they all
        // coincide and pin the point onto the carrier line.
        for g in &gens {
            let n = Vector2::new(-g.y, g.x).normalize();
            let extent: f64 = gens.iter().map(|h| n.dot(h).abs()).sum();
            if n.dot(&d).abs() > extent + TOL_IN {
                return false;
            }
        }
        // Rank-1 needs the along-axis extent as well; for rank-2 the edge
        // constraints above are already complete.
        if zonotope_rank(&gens) < 2 {
            let dir = gens[0].normalize();
            let extent: f64 = gens.iter().map(|h| dir.dot(h).abs()).sum();
            if dir.dot(&d).abs() > extent + TOL_IN {
                return false;
            }
        }
        true
    }

    /// Boundary polygon in counter-clockwise order.
    ///
    /// Generators are canonicalized to the upper half-plane and sorted by
    /// angle (O(l log l)); near-zero generators are dropped. Degenerate
    /// zonotopes yield 1 (point) or 2 (segment) vertices.
    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        let mut gens: Vec<Vector2<f64>> = self
            .generators
            .iter()
            .copied()
            .filter(|g| g.norm() > GEN_EPS)
            .map(|g| if g.y < 0.0 || (g.y == 0.0 && g.x < 0.0) { -g } else { g })
            .collect();
        if gens.is_empty() {
            return vec![self.center];
        }
        if zonotope_rank(&gens) < 2 {
            let total: Vector2<f64> = {
                let dir = gens[0].normalize();
                dir * gens.iter().map(|g| g.dot(&dir).abs()).sum::<f64>()
            };
            return vec![self.center - total, self.center + total];
        }
        gens.sort_by(|a, b| {
            a.y.atan2(a.x).partial_cmp(&b.y.atan2(b.x)).expect("finite generator angles")
        });
        let sum: Vector2<f64> = gens.iter().sum();
        let mut verts = Vec::with_capacity(2 * gens.len());
        let mut v = self.center - sum;
        verts.push(v);
        for g in &gens {
            v += 2.0 * g;
            verts.push(v);
        }
        for g in &gens[..gens.len() - 1] {
            v -= 2.0 * g;
            verts.push(v);
        }
        verts
    }
}

fn zonotope_rank(gens: &[Vector2<f64>]) -> usize {
    if gens.is_empty() {
        return 0;
    }
    let first = gens[0];
    for g in &gens[1..] {
        if (first.x * g.y - first.y * g.x).abs() > GEN_EPS * first.norm() * g.norm() {
            return 2;
        }
    }
    1
}

/// One right-angled triangle of a grid cell.
///
/// `orient = +1` is the lower triangle (right angle at the cell's bottom-left
/// corner), `orient = -1` the upper one (right angle at the top-right corner).
/// Every point of the triangle lies component-wise on the `orient` side of
/// the anchor, which is what makes the quadratic integrand bound one-sided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RightTriangle {
    /// Right-angle vertex w_c.
    pub anchor: Vector2<f64>,
    /// Positive leg lengths (horizontal, vertical).
    pub legs: (f64, f64),
    /// +1 lower / -1 upper.
    pub orient: i8,
    /// (row, column) of the owning grid cell, 1-based.
    pub cell_index: (usize, usize),
}

impl RightTriangle {
    pub fn vertices(&self) -> [Vector2<f64>; 3] {
        let s = self.orient as f64;
        [
            self.anchor,
            self.anchor + Vector2::new(s * self.legs.0, 0.0),
            self.anchor + Vector2::new(0.0, s * self.legs.1),
        ]
    }

    pub fn area(&self) -> f64 {
        0.5 * self.legs.0 * self.legs.1
    }

    /// Tight axis-aligned bounding box as (lower, upper) corners.
    pub fn bounding_box(&self) -> (Vector2<f64>, Vector2<f64>) {
        let [a, b, c] = self.vertices();
        (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
    }

    pub fn contains_point(&self, w: Vector2<f64>, tol: f64) -> bool {
        let s = self.orient as f64;
        let d = (w - self.anchor) * s;
        d.x >= -tol && d.y >= -tol && d.x / self.legs.0 + d.y / self.legs.1 <= 1.0 + tol
    }
}

/// Retained triangles of a k-by-k grid over a zonotope's bounding box.
#[derive(Debug, Clone)]
pub struct TriangleCover {
    pub triangles: Vec<RightTriangle>,
    pub source_zonotope: Zonotope2,
    pub grid_k: usize,
}

impl TriangleCover {
    /// Total area of the retained triangles.
    pub fn covered_area(&self) -> f64 {
        self.triangles.iter().map(|t| t.area()).sum()
    }

    pub fn contains_point(&self, w: Vector2<f64>, tol: f64) -> bool {
        self.triangles.iter().any(|t| t.contains_point(w, tol))
    }
}

/// Exact (up to `TOL_IN`) separating-axis test between a triangle and a
/// zonotope. Ties within tolerance report `true`, keeping covers sound.
pub fn triangle_intersects_zonotope(t: &RightTriangle, z: &Zonotope2) -> bool {
    let tv = t.vertices();
    let mut axes: Vec<Vector2<f64>> = Vec::with_capacity(3 + z.generators.len());
    for i in 0..3 {
        let e = tv[(i + 1) % 3] - tv[i];
        if e.norm() > GEN_EPS {
            axes.push(Vector2::new(-e.y, e.x).normalize());
        }
    }
    for g in &z.generators {
        if g.norm() > GEN_EPS {
            axes.push(Vector2::new(-g.y, g.x).normalize());
        }
    }
    for axis in axes {
        let (tri_lo, tri_hi) = tv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let p = axis.dot(v);
            (lo.min(p), hi.max(p))
        });
        let z_hi = z.support(axis);
        let z_lo = -z.support(-axis);
        if tri_lo > z_hi + TOL_IN || z_lo > tri_hi + TOL_IN {
            return false;
        }
    }
    true
}

/// Build the k-by-k triangle cover of `z`'s bounding box, keeping only the
/// triangles that meet `z`. The union of retained triangles covers `z`.
///
/// Zero-extent axes of degenerate zonotopes are widened to `TOL_IN` so every
/// cell keeps strictly positive legs.
pub fn build_cover(z: &Zonotope2, k: usize) -> Result<TriangleCover, GeomError> {
    if k == 0 {
        return Err(GeomError::ZeroGrid);
    }
    let (lo, hi) = z.bounding_box();
    let dx = ((hi.x - lo.x) / k as f64).max(TOL_IN);
    let dy = ((hi.y - lo.y) / k as f64).max(TOL_IN);
    let mut triangles = Vec::new();
    for k1 in 1..=k {
        for k2 in 1..=k {
            let cell_lo = Vector2::new(lo.x + (k2 - 1) as f64 * dx, lo.y + (k1 - 1) as f64 * dy);
            let lower = RightTriangle {
                anchor: cell_lo,
                legs: (dx, dy),
                orient: 1,
                cell_index: (k1, k2),
            };
            let upper = RightTriangle {
                anchor: cell_lo + Vector2::new(dx, dy),
                legs: (dx, dy),
                orient: -1,
                cell_index: (k1, k2),
            };
            for t in [lower, upper] {
                if triangle_intersects_zonotope(&t, z) {
                    triangles.push(t);
                }
            }
        }
    }
    Ok(TriangleCover { triangles, source_zonotope: z.clone(), grid_k: k })
}

/// Separating-axis intersection test between two zonotopes (ties within
/// `TOL_IN` count as intersecting).
pub fn zonotopes_intersect(a: &Zonotope2, b: &Zonotope2) -> bool {
    let mut axes: Vec<Vector2<f64>> = Vec::with_capacity(a.generators.len() + b.generators.len() + 1);
    for g in a.generators.iter().chain(&b.generators) {
        if g.norm() > GEN_EPS {
            axes.push(Vector2::new(-g.y, g.x).normalize());
        }
    }
    if axes.is_empty() {
        // Two points.
        return (a.center - b.center).norm() <= TOL_IN;
    }
    // Degenerate operands (points / segments) still need their carrier
    // direction tested.
    let d = b.center - a.center;
    if d.norm() > GEN_EPS {
        axes.push(d.normalize());
    }
    for axis in axes {
        let a_hi = a.support(axis);
        let a_lo = -a.support(-axis);
        let b_hi = b.support(axis);
        let b_lo = -b.support(-axis);
        if a_lo > b_hi + TOL_IN || b_lo > a_hi + TOL_IN {
            return false;
        }
    }
    true
}

/// 2D rotation matrix for angle `a` (radians).
pub fn rot(a: f64) -> Matrix2<f64> {
    let (s, c) = a.sin_cos();
    Matrix2::new(c, -s, s, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_point(z: &Zonotope2, rng: &mut impl Rng) -> Vector2<f64> {
        z.generators
            .iter()
            .fold(z.center, |acc, g| acc + g * rng.random_range(-1.0..=1.0))
    }

    fn unit_box() -> Zonotope2 {
        Zonotope2::aabb(Vector2::zeros(), Vector2::new(1.0, 1.0))
    }

    #[test]
    fn minkowski_point_translation() {
        let z = unit_box().minkowski_sum(&Zonotope2::point(Vector2::new(1.0, 0.0)));
        assert_eq!(z.center, Vector2::new(1.0, 0.0));
        assert_eq!(z.generators.len(), 2);
    }

    #[test]
    fn minkowski_of_points_is_point() {
        let z = Zonotope2::point(Vector2::zeros()).minkowski_sum(&Zonotope2::point(Vector2::zeros()));
        assert_eq!(z.center, Vector2::zeros());
        assert!(z.generators.is_empty());
    }

    #[test]
    fn minkowski_sampling_oracle() {
        let a = unit_box();
        let b = unit_box();
        let sum = a.minkowski_sum(&b);
        let (lo, hi) = sum.bounding_box();
        assert_relative_eq!(hi.x - lo.x, 4.0);
        assert_relative_eq!(hi.y - lo.y, 4.0);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = sample_point(&a, &mut rng) + sample_point(&b, &mut rng);
            assert!(sum.contains_point(p));
        }
    }

    #[test]
    fn linear_map_identity_and_rotation() {
        let z = Zonotope2::new(
            Vector2::new(0.5, -0.5),
            vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 2.0)],
        );
        let same = z.linear_map(&Matrix2::identity());
        assert_eq!(same, z);
        let rotated = z.linear_map(&rot(std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(rotated.generators[0].x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.generators[0].y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.generators[1].x, -2.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.generators[1].y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_map_sampling_oracle() {
        let z = Zonotope2::new(
            Vector2::new(1.0, 2.0),
            vec![Vector2::new(1.0, 0.3), Vector2::new(-0.2, 0.8), Vector2::new(0.5, 0.5)],
        );
        let a = Matrix2::new(0.7, -1.2, 0.4, 0.9);
        let mapped = z.linear_map(&a);
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = sample_point(&z, &mut rng);
            assert!(mapped.contains_point(a * p));
        }
    }

    #[test]
    fn contains_center_and_rejects_outside() {
        let z = Zonotope2::new(
            Vector2::new(3.0, -1.0),
            vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 2.0), Vector2::new(0.5, 0.5)],
        );
        assert!(z.contains_point(z.center));
        // Just beyond the support along +x.
        let reach: f64 = z.generators.iter().map(|g| g.x.abs()).sum();
        assert!(!z.contains_point(z.center + Vector2::new(1.001 * reach, 0.0)));
    }

    #[test]
    fn contains_constructive_sampling() {
        let z = Zonotope2::new(
            Vector2::new(-2.0, 4.0),
            vec![Vector2::new(0.9, 0.1), Vector2::new(-0.3, 1.4), Vector2::new(0.2, -0.2)],
        );
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(z.contains_point(sample_point(&z, &mut rng)));
        }
    }

    #[test]
    fn degenerate_segment_and_point() {
        let seg = Zonotope2::new(Vector2::zeros(), vec![Vector2::new(1.0, 1.0)]);
        assert!(seg.contains_point(Vector2::new(0.5, 0.5)));
        assert!(!seg.contains_point(Vector2::new(0.5, 0.6)));
        assert!(!seg.contains_point(Vector2::new(1.1, 1.1)));
        let pt = Zonotope2::point(Vector2::new(2.0, 2.0));
        assert!(pt.contains_point(Vector2::new(2.0, 2.0)));
        assert!(!pt.contains_point(Vector2::new(2.0, 2.1)));
    }

    #[test]
    fn vertices_of_box() {
        let verts = unit_box().vertices();
        assert_eq!(verts.len(), 4);
        for v in &verts {
            assert_relative_eq!(v.x.abs(), 1.0);
            assert_relative_eq!(v.y.abs(), 1.0);
        }
    }

    #[test]
    fn cover_of_box_k1_is_two_triangles() {
        let cover = build_cover(&unit_box(), 1).unwrap();
        assert_eq!(cover.triangles.len(), 2);
        assert_relative_eq!(cover.covered_area(), 4.0);
        assert!(build_cover(&unit_box(), 0).is_err());
    }

    #[test]
    fn cover_of_rotated_square_k24_sampling_oracle() {
        let square = unit_box().linear_map(&rot(0.6));
        let cover = build_cover(&square, 24).unwrap();
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10_000 {
            let p = sample_point(&square, &mut rng);
            assert!(cover.contains_point(p, TOL_IN));
        }
    }

    #[test]
    fn cover_triangle_sign_consistency() {
        let z = Zonotope2::new(
            Vector2::new(1.0, -2.0),
            vec![Vector2::new(1.2, 0.4), Vector2::new(-0.3, 0.9)],
        );
        let cover = build_cover(&z, 8).unwrap();
        for t in &cover.triangles {
            let s = t.orient as f64;
            for v in t.vertices() {
                let d = (v - t.anchor) * s;
                assert!(d.x >= -1e-12 && d.y >= -1e-12);
            }
        }
    }

    #[test]
    fn cover_refinement_monotone() {
        let z = Zonotope2::new(
            Vector2::zeros(),
            vec![Vector2::new(2.0, 0.5), Vector2::new(-0.4, 1.5), Vector2::new(0.3, 0.3)],
        );
        let a12 = build_cover(&z, 12).unwrap().covered_area();
        let a24 = build_cover(&z, 24).unwrap().covered_area();
        let a48 = build_cover(&z, 48).unwrap().covered_area();
        assert!(a24 <= a12 + 1e-12);
        assert!(a48 <= a24 + 1e-12);
    }

    #[test]
    fn degenerate_zonotope_cover() {
        let seg = Zonotope2::new(Vector2::new(0.5, 0.5), vec![Vector2::new(0.5, 0.5)]);
        let cover = build_cover(&seg, 4).unwrap();
        assert!(!cover.triangles.is_empty());
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let p = sample_point(&seg, &mut rng);
            assert!(cover.contains_point(p, 1e-6));
        }
    }

    #[test]
    fn triangle_zonotope_intersection_basics() {
        let z = unit_box();
        let around_center = RightTriangle {
            anchor: Vector2::new(-0.1, -0.1),
            legs: (0.5, 0.5),
            orient: 1,
            cell_index: (1, 1),
        };
        assert!(triangle_intersects_zonotope(&around_center, &z));
        let far = RightTriangle {
            anchor: Vector2::new(5.0, 5.0),
            legs: (0.5, 0.5),
            orient: 1,
            cell_index: (1, 1),
        };
        assert!(!triangle_intersects_zonotope(&far, &z));
    }

    #[test]
    fn triangle_grazing_contact_vs_sampling() {
        // Hypotenuse tangent to the box corner region.
        let z = unit_box();
        let t = RightTriangle {
            anchor: Vector2::new(1.0 + 1e-12, 0.0),
            legs: (0.5, 0.5),
            orient: 1,
            cell_index: (1, 1),
        };
        // Shares the boundary point (1, 0) within tolerance: conservative true.
        assert!(triangle_intersects_zonotope(&t, &z));
        let t2 = RightTriangle {
            anchor: Vector2::new(1.01, 0.0),
            legs: (0.5, 0.5),
            orient: 1,
            cell_index: (1, 1),
        };
        assert!(!triangle_intersects_zonotope(&t2, &z));
    }

    #[test]
    fn zonotope_pair_intersection() {
        let a = unit_box();
        let b = unit_box().translate(Vector2::new(1.9, 0.0));
        assert!(zonotopes_intersect(&a, &b));
        let c = unit_box().translate(Vector2::new(2.1, 0.0));
        assert!(!zonotopes_intersect(&a, &c));
        // Rotated square corner reaches sqrt(2) ~ 1.41 toward the unit box.
        let rot_box = unit_box().linear_map(&rot(0.78)).translate(Vector2::new(2.3, 0.0));
        assert!(zonotopes_intersect(&a, &rot_box));
        let rot_far = unit_box().linear_map(&rot(0.78)).translate(Vector2::new(2.6, 0.0));
        assert!(!zonotopes_intersect(&a, &rot_far));
        let seg = Zonotope2::new(Vector2::new(0.0, 1.5), vec![Vector2::new(2.0, 0.0)]);
        assert!(!zonotopes_intersect(&a, &seg));
        let seg2 = Zonotope2::new(Vector2::new(0.0, 0.5), vec![Vector2::new(2.0, 0.0)]);
        assert!(zonotopes_intersect(&a, &seg2));
    }

    proptest! {
        #[test]
        fn prop_cover_sound_over_random_zonotopes(
            seed in 0u64..200,
            k in 1usize..16,
            n_gens in 0usize..5,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let center = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let gens: Vec<Vector2<f64>> = (0..n_gens)
                .map(|_| Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect();
            let z = Zonotope2::new(center, gens);
            let cover = build_cover(&z, k).unwrap();
            for _ in 0..200 {
                let p = sample_point(&z, &mut rng);
                prop_assert!(cover.contains_point(p, 1e-7));
            }
        }

        #[test]
        fn prop_minkowski_membership(seed in 0u64..100) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mk = |rng: &mut StdRng| {
                let n = rng.random_range(0usize..4);
                Zonotope2::new(
                    Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                    (0..n)
                        .map(|_| Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                        .collect(),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let sum = a.minkowski_sum(&b);
            for _ in 0..50 {
                let p = sample_point(&a, &mut rng) + sample_point(&b, &mut rng);
                prop_assert!(sum.contains_point(p));
            }
        }
    }
}
