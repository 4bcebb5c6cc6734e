//! Reference risk estimators: Monte-Carlo ground truth, the one-sided
//! moment (Cantelli) bound, and the deterministic 5-sigma avoidance box.

use crate::pdf::PdfModel;
use crate::zonotope::Zonotope2;
use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("covariance is singular")]
    SingularCov,
    #[error("5-sigma box requires a Gaussian model")]
    NotGaussian,
}

/// Monte-Carlo membership estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Number of fixed sampling shards. Shard seeds derive from the master seed,
/// so the estimate is identical for any thread count.
const MC_SHARDS: usize = 64;

/// Estimate the probability mass of `region` under `model` with `n` draws.
/// Deterministic for a given seed.
pub fn mc_risk(region: &Zonotope2, model: &PdfModel, n: usize, seed: u64) -> McEstimate {
    let base = n / MC_SHARDS;
    let extra = n % MC_SHARDS;
    let hits: usize = (0..MC_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let count = base + usize::from(shard < extra);
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (shard as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            let mut hits = 0usize;
            for _ in 0..count {
                if region.contains_point(model.sample(&mut rng)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let value = hits as f64 / n as f64;
    McEstimate { value, std_error: (value * (1.0 - value) / n as f64).sqrt(), samples: n }
}

/// Distribution-free upper bound on `P(w in region)` for any distribution
/// with the given first two moments.
///
/// If the mean lies in the region the bound is trivially 1. Otherwise the
/// region is relaxed to the supporting half-space at its closest point to the
/// mean, where the one-sided Chebyshev bound applies:
/// `sigma_a^2 / (sigma_a^2 + d^2)` with `sigma_a^2 = a' cov a` along the
/// (unit) closest-point direction `a` and `d` the distance to the half-space.
pub fn cantelli_risk(
    region: &Zonotope2,
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
) -> Result<f64, BaselineError> {
    if cov.determinant().abs() < 1e-300 {
        return Err(BaselineError::SingularCov);
    }
    if region.contains_point(mean) {
        return Ok(1.0);
    }
    let closest = closest_point_on_zonotope(region, mean);
    let gap = closest - mean;
    let d = gap.norm();
    if d <= 0.0 {
        return Ok(1.0);
    }
    let a = gap / d;
    let sigma2 = (a.transpose() * cov * a)[(0, 0)].max(0.0);
    Ok((sigma2 / (sigma2 + d * d)).min(1.0))
}

/// Euclidean projection of `point` onto the (convex) zonotope boundary or
/// interior; for exterior points this is the closest boundary point.
fn closest_point_on_zonotope(z: &Zonotope2, point: Vector2<f64>) -> Vector2<f64> {
    let verts = z.vertices();
    match verts.len() {
        0 => z.center,
        1 => verts[0],
        2 => closest_on_segment(verts[0], verts[1], point),
        _ => {
            let mut best = verts[0];
            let mut best_d = f64::INFINITY;
            for i in 0..verts.len() {
                let a = verts[i];
                let b = verts[(i + 1) % verts.len()];
                let c = closest_on_segment(a, b, point);
                let d = (c - point).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        }
    }
}

fn closest_on_segment(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> Vector2<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Axis-aligned-in-principal-frame box containing the 5-sigma region of a
/// Gaussian: generators `5 sqrt(lambda_i) v_i` along the covariance
/// eigenvectors. Rejects non-Gaussian models.
pub fn five_sigma_box(model: &PdfModel) -> Result<Zonotope2, BaselineError> {
    let g = match model {
        PdfModel::Gaussian(g) => g,
        _ => return Err(BaselineError::NotGaussian),
    };
    let eig = nalgebra::SymmetricEigen::new(g.cov);
    let mut generators = Vec::with_capacity(2);
    for k in 0..2 {
        let lambda = eig.eigenvalues[k].max(0.0);
        let v: Vector2<f64> = eig.eigenvectors.column(k).into();
        generators.push(v * (5.0 * lambda.sqrt()));
    }
    Ok(Zonotope2::new(g.mean, generators))
}
