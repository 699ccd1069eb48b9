//! Synthetic grasp datasets.
//!
//! Each zone of an object gets a generating Gaussian over the grasp-pose
//! features. The built-in cup encodes the qualitative geometry of common cup
//! grasps: Usage holds the handle low on the side, Transfer comes from above
//! with the palm facing the table, Handover grips low on the far side so the
//! handle stays free. Combined zones sit between their constituents.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{GaussianError, GaussianParams};
use crate::taskmodel::{FeatureSchema, LabeledSample, TaskSet, ZoneLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("generator for zone {zone}: {reason}")]
    InvalidZone { zone: String, reason: String },
    #[error("layout zone {0} has no generator")]
    MissingZone(String),
    #[error("generator for zone {zone}: {source}")]
    Gaussian {
        zone: String,
        #[source]
        source: GaussianError,
    },
    #[error("unknown built-in dataset {0:?}")]
    UnknownBuiltin(String),
}

/// Generating Gaussian of one zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneGenerator {
    pub zone: TaskSet,
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub covariance: Vec<f64>,
}

impl ZoneGenerator {
    pub fn diagonal(zone: TaskSet, mean: Vec<f64>, std: &[f64]) -> Self {
        let d = mean.len();
        let mut covariance = vec![0.0; d * d];
        for (i, s) in std.iter().enumerate() {
            covariance[i * d + i] = s * s;
        }
        Self { zone, mean, covariance }
    }

    fn gaussian(&self) -> Result<GaussianParams, GaussianError> {
        let d = self.mean.len();
        if self.covariance.len() != d * d {
            return Err(GaussianError::DimensionMismatch {
                expected: d * d,
                actual: self.covariance.len(),
            });
        }
        GaussianParams::new(
            DVector::from_column_slice(&self.mean),
            DMatrix::from_row_slice(d, d, &self.covariance),
        )
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub object: String,
    pub layout: ZoneLayout,
    pub schema: FeatureSchema,
    pub zones: Vec<ZoneGenerator>,
    pub samples_per_zone: usize,
    pub seed: u64,
}

/// Unit-norm group means must have norm one within this tolerance.
pub const MEAN_NORM_TOLERANCE: f64 = 1e-12;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for &zone in self.layout.zones() {
            if !self.zones.iter().any(|g| g.zone == zone) {
                return Err(DatasetError::MissingZone(self.layout.label(zone)));
            }
        }
        for g in &self.zones {
            let label = self.layout.label(g.zone);
            if self.layout.index_of(g.zone).is_none() {
                return Err(DatasetError::InvalidZone {
                    zone: label,
                    reason: "not in the layout".into(),
                });
            }
            if g.mean.len() != self.schema.len() {
                return Err(DatasetError::InvalidZone {
                    zone: label,
                    reason: format!("mean has {} features, schema has {}", g.mean.len(), self.schema.len()),
                });
            }
            for grp in self.schema.unit_norm_groups() {
                let n = grp.iter().map(|&i| g.mean[i] * g.mean[i]).sum::<f64>().sqrt();
                if (n - 1.0).abs() > MEAN_NORM_TOLERANCE {
                    return Err(DatasetError::InvalidZone {
                        zone: label,
                        reason: format!("unit-norm group {grp:?} of the mean has norm {n}"),
                    });
                }
            }
            g.gaussian()
                .map_err(|source| DatasetError::Gaussian { zone: label, source })?;
        }
        Ok(())
    }

    /// Same generators restricted to a smaller layout over the same tasks.
    pub fn restricted(&self, layout: ZoneLayout) -> Result<Self, DatasetError> {
        let zones = layout
            .zones()
            .iter()
            .map(|&z| {
                self.zones
                    .iter()
                    .find(|g| g.zone == z)
                    .cloned()
                    .ok_or_else(|| DatasetError::MissingZone(layout.label(z)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            layout,
            zones,
            ..self.clone()
        })
    }
}

/// Draws `samples_per_zone` poses per zone, in layout order, from one seeded
/// stream. Unit-norm groups are renormalised after each draw.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<LabeledSample>, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.samples_per_zone * spec.layout.len());
    for &zone in spec.layout.zones() {
        let gen = spec.zones.iter().find(|g| g.zone == zone).expect("validated");
        let gaussian = gen.gaussian().expect("validated");
        for mut x in gaussian.sample_with(&mut rng, spec.samples_per_zone) {
            for grp in spec.schema.unit_norm_groups() {
                let n = grp.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                for &i in grp {
                    x[i] /= n;
                }
            }
            out.push(LabeledSample::new(x, zone));
        }
    }
    Ok(out)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Position (m), direction and grip force (N) spreads used by the built-ins.
const POSITION_STD: f64 = 0.008;
const DIRECTION_STD: f64 = 0.03;
const FORCE_STD: f64 = 1.5;

pub const DEFAULT_SAMPLES_PER_ZONE: usize = 80;
pub const DEFAULT_SEED: u64 = 7;

fn pose_zone(bits: u8, position: [f64; 3], direction: [f64; 3], force: f64) -> ZoneGenerator {
    let d = unit(direction);
    ZoneGenerator::diagonal(
        TaskSet::from_bits(bits),
        vec![position[0], position[1], position[2], d[0], d[1], d[2], force],
        &[
            POSITION_STD,
            POSITION_STD,
            POSITION_STD,
            DIRECTION_STD,
            DIRECTION_STD,
            DIRECTION_STD,
            FORCE_STD,
        ],
    )
}

fn cup7() -> GeneratorSpec {
    // Handle on +x. Usage grips it from the side; Handover grips the body low
    // on the opposite side; Transfer comes from above.
    GeneratorSpec {
        object: "cup".into(),
        layout: ZoneLayout::seven_zone(),
        schema: FeatureSchema::grasp_pose(),
        zones: vec![
            pose_zone(0b001, [0.035, -0.005, 0.045], [-1.0, 0.0, -0.1], 7.0),
            pose_zone(0b010, [0.0, 0.0, 0.105], [0.0, 0.0, -1.0], 11.0),
            pose_zone(0b100, [-0.045, 0.005, 0.038], [1.0, 0.0, 0.2], 6.0),
            pose_zone(0b011, [0.025, 0.005, 0.060], [-0.3, -0.2, -0.8], 9.0),
            pose_zone(0b101, [-0.005, 0.040, 0.040], [-0.1, -1.0, 0.2], 8.0),
            pose_zone(0b110, [-0.028, -0.010, 0.077], [0.45, 0.1, -0.8], 11.0),
            pose_zone(0b111, [0.0, 0.023, 0.060], [0.1, -0.4, -0.9], 10.0),
        ],
        samples_per_zone: DEFAULT_SAMPLES_PER_ZONE,
        seed: DEFAULT_SEED,
    }
}

fn flashlight7() -> GeneratorSpec {
    let h = FRAC_1_SQRT_2;
    // Lying along x with the head at +x and the switch on top. Usage wraps the
    // body with the thumb on the switch; Transfer comes from above, near
    // perpendicular to the table; Handover holds the head so the body is free.
    GeneratorSpec {
        object: "flashlight".into(),
        layout: ZoneLayout::seven_zone(),
        schema: FeatureSchema::grasp_pose(),
        zones: vec![
            pose_zone(0b001, [0.0, 0.030, 0.025], [0.0, -1.0, 0.0], 9.0),
            pose_zone(0b010, [0.0, 0.0, 0.070], [0.0, 0.0, -1.0], 11.0),
            pose_zone(0b100, [0.070, 0.0, 0.030], [-1.0, 0.0, 0.0], 6.0),
            pose_zone(0b011, [0.0, 0.020, 0.050], [0.0, -h, -h], 10.0),
            pose_zone(0b101, [0.035, 0.025, 0.028], [-h, -h, 0.0], 7.0),
            pose_zone(0b110, [0.050, 0.0, 0.060], [-h, 0.0, -h], 8.0),
            pose_zone(0b111, [0.030, 0.015, 0.050], [-1.0, -1.0, -1.0], 9.0),
        ],
        samples_per_zone: DEFAULT_SAMPLES_PER_ZONE,
        seed: DEFAULT_SEED,
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["cup7", "cup5", "cup4", "flashlight7"];

/// Built-in spec by name: `cup7`, `cup5`, `cup4` or `flashlight7`.
pub fn builtin_spec(name: &str) -> Result<GeneratorSpec, DatasetError> {
    match name {
        "cup7" => Ok(cup7()),
        "cup5" => cup7().restricted(ZoneLayout::five_zone()),
        "cup4" => cup7().restricted(ZoneLayout::four_zone()),
        "flashlight7" => Ok(flashlight7()),
        other => Err(DatasetError::UnknownBuiltin(other.to_string())),
    }
}

pub fn builtin_specs() -> BTreeMap<String, GeneratorSpec> {
    BUILTIN_NAMES
        .iter()
        .map(|&n| (n.to_string(), builtin_spec(n).expect("built-in")))
        .collect()
}
