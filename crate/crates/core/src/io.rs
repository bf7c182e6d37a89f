//! JSON observation files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "observations": [{
//!     "p1": {"x": 0.1, "z": 0.9}, "p2": {...}, "p3": {...},
//!     "normals": [[nx, ny, nz], [..], [..], [..]],
//!     "d1": 0.8, "d2": 0.9,
//!     "seg13": [{"x": .., "z": ..}, ...],
//!     "seg23": [...]
//!   }],
//!   "ground_truth": {"R": [[..], [..], [..]], "t": [tx, ty, tz]}
//! }
//! ```
//!
//! Units are meters. `R` is row-major; `seg13`, `seg23` and `ground_truth`
//! are optional.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constraints::Observation;
use crate::error::{CalibError, Result};
use crate::geometry::RigidPose;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub rotation: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl From<&RigidPose> for PoseRecord {
    fn from(pose: &RigidPose) -> Self {
        let r = &pose.rotation;
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            t: pose.translation.into(),
        }
    }
}

impl PoseRecord {
    /// Checks that `R` is a rotation.
    pub fn to_pose(&self) -> Result<RigidPose> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        RigidPose::new(r, Vector3::from(self.t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub schema_version: u32,
    pub observations: Vec<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PoseRecord>,
}

impl ObservationFile {
    pub fn new(observations: Vec<Observation>, ground_truth: Option<&RigidPose>) -> Self {
        Self { schema_version: SCHEMA_VERSION, observations, ground_truth: ground_truth.map(PoseRecord::from) }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| CalibError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CalibError::UnsupportedSchema(file.schema_version));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("observation files serialize")
    }

    pub fn ground_truth_pose(&self) -> Result<Option<RigidPose>> {
        self.ground_truth.as_ref().map(PoseRecord::to_pose).transpose()
    }
}
