//! TOML-backed configuration: density models, vehicle parameters and
//! single-solve planning scenes.

use crate::pdf::{BivariateBeta, Gaussian, Mixture, PdfModel};
use crate::scenario::TrafficObstacle;
use crate::vehicle::{FamilyKind, VehicleParams, VehicleState};
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid density model: {0}")]
    Pdf(#[from] crate::pdf::PdfError),
    #[error("unknown trajectory family '{0}'")]
    UnknownFamily(String),
}

/// Density model specification.
///
/// ```toml
/// kind = "gaussian"
/// mean = [12.0, 3.7]
/// cov = [[1.0, 0.0], [0.0, 0.25]]
/// ```
///
/// Mixtures list `components = [{ weight, mean, cov }, ...]`; the beta family
/// takes `shapes = [a, b, c, d]`, `rho`, `support_lo`, `support_hi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PdfSpec {
    #[serde(rename = "gaussian")]
    Gaussian { mean: [f64; 2], cov: [[f64; 2]; 2] },
    #[serde(rename = "gaussian_mixture")]
    GaussianMixture { components: Vec<MixtureComponentSpec> },
    #[serde(rename = "bivariate_beta")]
    BivariateBeta { shapes: [f64; 4], rho: f64, support_lo: [f64; 2], support_hi: [f64; 2] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponentSpec {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

fn mat2(m: [[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

impl PdfSpec {
    pub fn build(&self) -> Result<PdfModel, ConfigError> {
        Ok(match self {
            PdfSpec::Gaussian { mean, cov } => {
                PdfModel::Gaussian(Gaussian::new(Vector2::from(*mean), mat2(*cov))?)
            }
            PdfSpec::GaussianMixture { components } => {
                let weights = components.iter().map(|c| c.weight).collect();
                let comps = components
                    .iter()
                    .map(|c| Gaussian::new(Vector2::from(c.mean), mat2(c.cov)))
                    .collect::<Result<Vec<_>, _>>()?;
                PdfModel::GaussianMixture(Mixture::new(weights, comps)?)
            }
            PdfSpec::BivariateBeta { shapes, rho, support_lo, support_hi } => {
                PdfModel::BivariateBeta(BivariateBeta::new(
                    *shapes,
                    *rho,
                    Vector2::from(*support_lo),
                    Vector2::from(*support_hi),
                )?)
            }
        })
    }

    pub fn load(path: &Path) -> Result<PdfModel, ConfigError> {
        let spec: PdfSpec = toml::from_str(&std::fs::read_to_string(path)?)?;
        spec.build()
    }
}

/// Vehicle parameter file: the serialized form of [`VehicleParams`].
pub fn load_vehicle_params(path: &Path) -> Result<VehicleParams, ConfigError> {
    Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
}

/// One traffic participant in a planning scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub axis: [f64; 2],
    pub start: [f64; 2],
    pub speed: f64,
    /// Footprint half-extents (along axis, across axis).
    pub half: [f64; 2],
    #[serde(default)]
    pub is_static: bool,
}

impl ObstacleSpec {
    pub fn build(&self) -> TrafficObstacle {
        let axis = Vector2::from(self.axis);
        TrafficObstacle {
            axis: axis / axis.norm(),
            start: Vector2::from(self.start),
            speed: self.speed,
            half: Vector2::from(self.half),
            is_static: self.is_static,
        }
    }
}

/// A single planning scene for the `plan` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanScene {
    pub ego: EgoSpec,
    pub waypoint: [f64; 2],
    pub epsilon: f64,
    pub families: Vec<String>,
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default = "default_grid_k")]
    pub grid_k: usize,
    #[serde(default = "default_t_plan")]
    pub t_plan: f64,
}

fn default_grid_k() -> usize {
    24
}

fn default_t_plan() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoSpec {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub u: f64,
}

impl PlanScene {
    pub fn load(path: &Path) -> Result<PlanScene, ConfigError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn ego_state(&self, params: &VehicleParams) -> VehicleState {
        if self.ego.u == 0.0 {
            VehicleState::at_rest(self.ego.x, self.ego.y, self.ego.h)
        } else {
            VehicleState::moving(self.ego.x, self.ego.y, self.ego.h, self.ego.u, params)
        }
    }

    pub fn family_kinds(&self) -> Result<Vec<FamilyKind>, ConfigError> {
        self.families
            .iter()
            .map(|s| FamilyKind::from_label(s).ok_or_else(|| ConfigError::UnknownFamily(s.clone())))
            .collect()
    }
}
