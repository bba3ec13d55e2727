//! Scenario documents: robot, workpiece, workflow and calibration for one
//! episode.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonomy::{CouplingWeights, SafetyBox, SaturationSet};
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};
use crate::perception::{CameraIntrinsics, IcpConfig, PoseNudge};
use crate::pose::Pose;
use crate::task::{NominalParameters, StructuredModel};
use crate::workpiece::{MaterialParams, SurfaceGeometry, SurfaceGrid, UvRect};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("robot model: {0}")]
    Robot(#[from] KinematicsError),
    #[error("reading {path}")]
    Io { path: String, source: std::io::Error },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowKind {
    Structured,
    Unstructured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GeometryEntry {
    pub id: String,
    pub geometry: SurfaceGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CoatingPatch {
    pub rect: UvRect,
    pub coating_um: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CoatingSpec {
    /// Uniform thickness; the calibration default when absent.
    pub uniform_um: Option<f64>,
    /// Applied in order over the uniform value.
    pub patches: Vec<CoatingPatch>,
    /// Full per-cell map, row-major; overrides everything else.
    pub cells_um: Option<Vec<f64>>,
}

/// Cells that must be sanded. All cells when both fields are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub rects: Option<Vec<UvRect>>,
    pub cells: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WorkpieceSpec {
    pub geometry_id: String,
    #[serde(default)]
    pub coating: CoatingSpec,
    #[serde(default)]
    pub target: TargetSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AutonomySettings {
    pub saturation: SaturationSet,
    pub coupling: CouplingWeights,
    pub safety: SafetyBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSettings {
    pub camera: CameraIntrinsics,
    pub noise_sigma_m: f64,
    /// Joint offsets added to the current configuration for each pan view
    /// (clamped into limits).
    pub pan_offsets: Vec<Vec<f64>>,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            camera: CameraIntrinsics::default(),
            noise_sigma_m: 0.002,
            pan_offsets: vec![
                vec![0.0; 7],
                vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![-0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct UnstructuredSettings {
    pub default_parameters: NominalParameters,
    /// Spacing of the reachability preview grid inside the marker quad.
    pub preview_spacing_m: f64,
}

impl Default for UnstructuredSettings {
    fn default() -> Self {
        UnstructuredSettings { default_parameters: NominalParameters::default(), preview_spacing_m: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub workflow: WorkflowKind,
    /// Built-in robot name (`franka`) or a robot JSON path relative to the
    /// scenario file.
    #[serde(default = "default_robot")]
    pub robot: String,
    pub geometries: Vec<GeometryEntry>,
    pub workpiece: WorkpieceSpec,
    #[serde(default)]
    pub structured_models: Vec<StructuredModel>,
    /// Geometry the automatic identification proposes first. Defaults to the
    /// true workpiece geometry.
    #[serde(default)]
    pub identified_geometry: Option<String>,
    /// Where the workpiece is expected to be; the registration starts here.
    pub planned_pose: Pose,
    /// Actual placement relative to the plan.
    #[serde(default)]
    pub placement_error: PoseNudge,
    /// Extra placement error applied on every reposition.
    #[serde(default)]
    pub reposition_error: PoseNudge,
    #[serde(default)]
    pub initial_config: Option<JointConfig>,
    /// Configuration used while the sanding disc is changed.
    #[serde(default)]
    pub sandpaper_change_config: Option<JointConfig>,
    #[serde(default)]
    pub calibration: MaterialParams,
    #[serde(default)]
    pub autonomy: AutonomySettings,
    #[serde(default)]
    pub scan: ScanSettings,
    #[serde(default)]
    pub registration: IcpConfig,
    #[serde(default)]
    pub unstructured: UnstructuredSettings,
    #[serde(default = "default_dt")]
    pub tick_dt_s: f64,
    #[serde(default = "default_tau")]
    pub force_tau_s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_robot() -> String {
    "franka".into()
}

fn default_dt() -> f64 {
    0.01
}

fn default_tau() -> f64 {
    0.1
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Scenario, ScenarioError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Scenario::from_json_str(&text)
    }

    pub fn schema() -> schemars::Schema {
        schemars::schema_for!(Scenario)
    }

    pub fn schema_json() -> String {
        serde_json::to_string_pretty(&Scenario::schema()).expect("schema serialises") + "\n"
    }

    pub fn load_robot(&self, base_dir: Option<&Path>) -> Result<RobotModel, ScenarioError> {
        if self.robot == "franka" {
            return Ok(RobotModel::franka());
        }
        let path = match base_dir {
            Some(dir) => dir.join(&self.robot),
            None => Path::new(&self.robot).to_path_buf(),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Ok(RobotModel::from_json_str(&text)?)
    }

    pub fn geometry(&self, id: &str) -> Option<&SurfaceGeometry> {
        self.geometries.iter().find(|g| g.id == id).map(|g| &g.geometry)
    }

    pub fn identified_geometry_id(&self) -> &str {
        self.identified_geometry.as_deref().unwrap_or(&self.workpiece.geometry_id)
    }

    pub fn true_pose(&self) -> Pose {
        self.placement_error.apply(&self.planned_pose)
    }

    pub fn stepover_m(&self) -> f64 {
        self.calibration.disc_radius_m()
    }

    /// Workpiece at its true pose with the initial coating and target mask.
    pub fn build_grid(&self) -> Result<SurfaceGrid, ScenarioError> {
        let w = &self.workpiece;
        let geometry = self
            .geometry(&w.geometry_id)
            .ok_or_else(|| ScenarioError::Invalid(format!("unknown workpiece geometry '{}'", w.geometry_id)))?;
        let coating = w.coating.uniform_um.unwrap_or(self.calibration.coating_um);
        let mut grid = SurfaceGrid::new(&w.geometry_id, *geometry, self.calibration.cell_size_m(), coating, self.true_pose())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        for patch in &w.coating.patches {
            grid.set_coating_rect(&patch.rect, patch.coating_um);
        }
        if let Some(cells) = &w.coating.cells_um {
            if cells.len() != grid.len() {
                return invalid(format!("coating map has {} cells, grid has {}", cells.len(), grid.len()));
            }
            grid.coating_um.clone_from(cells);
        }
        if grid.coating_um.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return invalid("coating must be finite and non-negative");
        }
        if let Some(rects) = &w.target.rects {
            grid.set_target_rects(rects);
        }
        if let Some(cells) = &w.target.cells {
            if cells.len() != grid.len() {
                return invalid(format!("target mask has {} cells, grid has {}", cells.len(), grid.len()));
            }
            grid.target.clone_from(cells);
        }
        Ok(grid)
    }

    pub fn validate(&self, robot: &RobotModel) -> Result<(), ScenarioError> {
        let mut ids: Vec<&str> = self.geometries.iter().map(|g| g.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("geometry ids must be unique");
        }
        for g in &self.geometries {
            g.geometry.validate().map_err(|e| ScenarioError::Invalid(format!("geometry '{}': {e}", g.id)))?;
        }
        self.calibration.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.build_grid()?;
        if self.geometry(self.identified_geometry_id()).is_none() {
            return invalid(format!("unknown identified geometry '{}'", self.identified_geometry_id()));
        }
        for m in &self.structured_models {
            if self.geometry(&m.geometry_id).is_none() {
                return invalid(format!("structured model for unknown geometry '{}'", m.geometry_id));
            }
            m.nominal
                .validate(self.calibration.pitch_max_rad)
                .map_err(|e| ScenarioError::Invalid(format!("structured model '{}': {e}", m.geometry_id)))?;
        }
        if self.workflow == WorkflowKind::Structured
            && !self.structured_models.iter().any(|m| m.geometry_id == self.identified_geometry_id())
        {
            return invalid("structured workflow needs a stored model for the identified geometry");
        }
        self.unstructured
            .default_parameters
            .validate(self.calibration.pitch_max_rad)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(self.unstructured.preview_spacing_m > 0.0) {
            return invalid("preview spacing must be positive");
        }
        let a = &self.autonomy;
        a.saturation.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        a.coupling.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        a.safety.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(self.tick_dt_s > 0.0 && self.tick_dt_s <= 0.05) {
            return invalid("tick_dt_s must lie in (0, 0.05]");
        }
        if !(self.force_tau_s > 0.0 && self.force_tau_s.is_finite()) {
            return invalid("force_tau_s must be positive");
        }
        if !(self.scan.noise_sigma_m >= 0.0 && self.scan.noise_sigma_m.is_finite()) {
            return invalid("scan noise must be non-negative");
        }
        if self.scan.pan_offsets.is_empty() || self.scan.pan_offsets.iter().any(|o| o.len() != robot.dof()) {
            return invalid(format!("pan offsets must be non-empty {}-vectors", robot.dof()));
        }
        let c = &self.scan.camera;
        if c.width == 0 || c.height == 0 || !(c.min_range_m < c.max_range_m) {
            return invalid("camera intrinsics are degenerate");
        }
        if !self.placement_error.is_finite() || !self.reposition_error.is_finite() {
            return invalid("placement errors must be finite");
        }
        for q in [&self.initial_config, &self.sandpaper_change_config].into_iter().flatten() {
            robot.check_limits(q)?;
        }
        Ok(())
    }
}
