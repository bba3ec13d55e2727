//! Workflow phase machine and the time-stepped sanding loop.

use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::autonomy::{backtrack_rate, command, CommandVector, CorrectionInput};
use crate::exec::Parallelism;
use crate::kinematics::{JointConfig, KinematicsError, Reachability, ReachabilityStatus, RobotModel};
use crate::perception::{
    apply_manual_adjustment, auto_register, confirm_fit, simulate_scan, PerceptionError, PointCloud, PoseNudge,
    RegistrationResult,
};
use crate::pose::Pose;
use crate::scenario::{Scenario, ScenarioError, WorkflowKind};
use crate::task::{
    generate_raster, load_structured_model, project_markers, quad_reachability, reposition_object,
    segment_reachability, MarkerSet, NominalParameters, SegmentStatus, SurfaceQuad, TaskError, TaskProgram,
};
use crate::workpiece::{
    change_sandpaper, coverage_metrics, coverage_metrics_masked, removal_step, wear_update, CoverageMetrics,
    MaterialError, SandpaperState, SurfaceGrid, ToolContact,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("action '{action}' is not valid in phase {phase:?}")]
    InvalidAction { phase: Phase, action: String },
    #[error("{action}: {reason}")]
    Rejected { action: String, reason: String },
    #[error("tick needs phase Executing, session is {0:?}")]
    NotExecuting(Phase),
    #[error("time step {0} s outside (0, 0.05]")]
    InvalidDt(f64),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

pub const MAX_TICK_DT: f64 = 0.05;

/// First-order lag toward `target`, discretised exactly so any step size is stable.
pub fn track_force(current: f64, target: f64, dt: f64, tau: f64) -> f64 {
    current + (target - current) * (1.0 - (-dt / tau).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Positioning,
    Scanning,
    Registering,
    ReachabilityReview,
    Executing,
    Paused,
    SandpaperChange,
    Repositioning,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OperatorAction {
    MoveRobot { q: Vec<f64> },
    Scan,
    ScanComplete,
    SelectGeometry { id: String },
    NudgePose { nudge: PoseNudge },
    AutoFit,
    ConfirmFit,
    SetMarkers { markers: MarkerSet },
    SetParameters { parameters: NominalParameters },
    Start,
    Pause,
    Resume,
    ChangeSandpaper,
    SandpaperChanged,
    Reposition {
        #[serde(default)]
        rotate_z_deg: f64,
        #[serde(default)]
        translate_m: [f64; 3],
    },
}

impl OperatorAction {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorAction::MoveRobot { .. } => "move_robot",
            OperatorAction::Scan => "scan",
            OperatorAction::ScanComplete => "scan_complete",
            OperatorAction::SelectGeometry { .. } => "select_geometry",
            OperatorAction::NudgePose { .. } => "nudge_pose",
            OperatorAction::AutoFit => "auto_fit",
            OperatorAction::ConfirmFit => "confirm_fit",
            OperatorAction::SetMarkers { .. } => "set_markers",
            OperatorAction::SetParameters { .. } => "set_parameters",
            OperatorAction::Start => "start",
            OperatorAction::Pause => "pause",
            OperatorAction::Resume => "resume",
            OperatorAction::ChangeSandpaper => "change_sandpaper",
            OperatorAction::SandpaperChanged => "sandpaper_changed",
            OperatorAction::Reposition { .. } => "reposition",
        }
    }
}

/// Action kinds accepted in `phase` for `workflow`.
pub fn valid_actions(workflow: WorkflowKind, phase: Phase) -> &'static [&'static str] {
    use Phase::*;
    use WorkflowKind::*;
    match (workflow, phase) {
        (_, Positioning | Repositioning) => &["move_robot", "scan"],
        (_, Scanning) => &["scan_complete"],
        (Structured, Registering) => &["select_geometry", "nudge_pose", "auto_fit", "confirm_fit"],
        (Unstructured, Registering) => &[],
        (Structured, ReachabilityReview) => &["start", "reposition"],
        (Unstructured, ReachabilityReview) => &["set_markers", "set_parameters", "start"],
        (_, Executing) => &["pause", "change_sandpaper"],
        (Structured, Paused) => &["resume", "change_sandpaper", "reposition"],
        (Unstructured, Paused) => &["resume", "change_sandpaper"],
        (_, SandpaperChange) => &["sandpaper_changed"],
        (Structured, Complete) => &["reposition"],
        (Unstructured, Complete) => &["set_markers", "set_parameters"],
    }
}

/// Position along the program: segment index and arc length into it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Cursor {
    pub segment: usize,
    pub arc_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Session clock, seconds.
    pub t: f64,
    pub phase: Phase,
    pub event: String,
    pub payload: Value,
    /// Removal steps applied so far; lets the log prove sanding only
    /// happened while executing.
    pub removal_steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("events serialise"));
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.event == name)
    }

    /// True when every increase of the removal counter happened while the
    /// phase in effect was Executing.
    pub fn removal_only_while_executing(&self) -> bool {
        self.events.windows(2).all(|w| w[1].removal_steps == w[0].removal_steps || w[0].phase == Phase::Executing)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RunState {
    order: Vec<usize>,
    pos: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SegmentCounts {
    pub completed: usize,
    pub reachable: usize,
    pub unreachable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RegistrationScores {
    pub rms_residual_m: f64,
    pub inlier_fraction: f64,
    pub plausible: bool,
    pub accepted: bool,
    pub iterations: usize,
    pub weak_dofs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub phase: Phase,
    pub coverage: CoverageMetrics,
    /// Coverage over the cells inside the marker quad (unstructured runs).
    pub quad_coverage: Option<CoverageMetrics>,
    pub segments: SegmentCounts,
    pub clock_s: f64,
    pub ticks: u64,
    pub removal_steps: u64,
    pub sandpaper_changes: u32,
    pub sandpaper: SandpaperState,
    pub registration: Option<RegistrationScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SegmentView {
    pub id: usize,
    pub status: SegmentStatus,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GridPointView {
    pub uv: [f64; 2],
    pub status: ReachabilityStatus,
    pub color: String,
}

/// Read-only view of a session for clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionSnapshot {
    pub scenario: String,
    pub workflow: WorkflowKind,
    pub phase: Phase,
    pub valid_actions: Vec<String>,
    pub clock_s: f64,
    pub cursor: Cursor,
    pub segments: Vec<SegmentView>,
    pub sandpaper: SandpaperState,
    pub tracked_force_n: f64,
    pub command: CommandVector,
    pub tool_uv: Option<[f64; 2]>,
    pub coverage: CoverageMetrics,
    pub quad_coverage: Option<CoverageMetrics>,
    pub registration: Option<RegistrationScores>,
    pub geometry_id: String,
    pub geometries: Vec<String>,
    pub parameters: NominalParameters,
    pub markers: Option<MarkerSet>,
    pub quad: Option<SurfaceQuad>,
    pub reachability_grid: Vec<GridPointView>,
    pub robot_config: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickReport {
    pub command: CommandVector,
    pub removed_mm3: f64,
    pub finished: bool,
}

/// One operator episode. Single writer: whoever owns it applies actions and
/// ticks; readers take [`Session::snapshot`].
#[derive(Clone, Debug)]
pub struct Session {
    pub scenario: Arc<Scenario>,
    pub robot: Arc<RobotModel>,
    pub workflow: WorkflowKind,
    pub phase: Phase,
    pub config: JointConfig,
    /// Ground-truth workpiece.
    pub grid: SurfaceGrid,
    pub program: Option<TaskProgram>,
    pub paper: SandpaperState,
    pub cursor: Cursor,
    pub tracked_force_n: f64,
    pub clock_s: f64,
    pub log: EventLog,
    pub seed: u64,
    pub geometry_id: String,
    pub registration: Option<RegistrationResult>,
    pub params: NominalParameters,
    pub markers: Option<MarkerSet>,
    pub quad: Option<SurfaceQuad>,
    pub reach_preview: Vec<([f64; 2], ReachabilityStatus)>,
    pub last_command: CommandVector,
    /// Disc center on the true surface at the last tick.
    pub tool_uv: Option<[f64; 2]>,
    pub ticks: u64,
    pub removal_steps: u64,
    pub sandpaper_changes: u32,
    /// Every scan taken, when enabled with [`Session::keep_scans`].
    pub scan_history: Vec<PointCloud>,
    keep_scans: bool,
    pose_guess: Pose,
    scan: Option<PointCloud>,
    scans: u64,
    run: Option<RunState>,
    parked_config: Option<JointConfig>,
    par: Parallelism,
}

impl Session {
    pub fn new(scenario: Scenario, robot: RobotModel, seed: u64) -> Result<Session, SessionError> {
        scenario.validate(&robot)?;
        let grid = scenario.build_grid()?;
        let config = scenario.initial_config.clone().unwrap_or_else(|| robot.home.clone());
        let geometry_id = scenario.identified_geometry_id().to_string();
        let mut s = Session {
            workflow: scenario.workflow,
            phase: Phase::Positioning,
            config,
            program: None,
            paper: SandpaperState::fresh(),
            cursor: Cursor::default(),
            tracked_force_n: 0.0,
            clock_s: 0.0,
            log: EventLog::default(),
            seed,
            geometry_id,
            registration: None,
            params: scenario.unstructured.default_parameters,
            markers: None,
            quad: None,
            reach_preview: Vec::new(),
            last_command: CommandVector::ZERO,
            tool_uv: None,
            ticks: 0,
            removal_steps: 0,
            sandpaper_changes: 0,
            scan_history: Vec::new(),
            keep_scans: false,
            pose_guess: scenario.planned_pose,
            scan: None,
            scans: 0,
            run: None,
            parked_config: None,
            par: Parallelism::default(),
            grid,
            scenario: Arc::new(scenario),
            robot: Arc::new(robot),
        };
        if s.workflow == WorkflowKind::Structured {
            s.program = Some(s.load_program(&s.geometry_id.clone())?);
        }
        s.record("session_start", json!({
            "scenario": s.scenario.name,
            "workflow": s.workflow,
            "seed": seed,
        }));
        Ok(s)
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.par = par;
        self
    }

    pub fn keep_scans(mut self, keep: bool) -> Self {
        self.keep_scans = keep;
        self
    }

    pub fn last_scan(&self) -> Option<&PointCloud> {
        self.scan.as_ref()
    }

    pub fn parallelism(&self) -> Parallelism {
        self.par
    }

    fn record(&mut self, event: &str, payload: Value) {
        self.log.events.push(Event {
            t: self.clock_s,
            phase: self.phase,
            event: event.to_string(),
            payload,
            removal_steps: self.removal_steps,
        });
    }

    /// Appends an externally observed event (e.g. transport bookkeeping).
    pub fn log_event(&mut self, event: &str, payload: Value) {
        self.record(event, payload);
    }

    fn set_phase(&mut self, to: Phase) {
        let from = self.phase;
        self.phase = to;
        self.record("phase", json!({ "from": from, "to": to }));
    }

    fn reachability(&self) -> Reachability<'_> {
        Reachability::new(&self.robot)
    }

    fn load_program(&self, geometry_id: &str) -> Result<TaskProgram, SessionError> {
        let sc = &self.scenario;
        let geometry = sc.geometry(geometry_id).ok_or_else(|| TaskError::UnknownGeometry(geometry_id.to_string()))?;
        let model_grid = if geometry_id == self.grid.id {
            self.grid.clone()
        } else {
            SurfaceGrid::new(geometry_id, *geometry, self.grid.cell_size_m, 0.0, self.pose_guess)
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?
        };
        Ok(load_structured_model(geometry_id, &sc.structured_models, &model_grid, &self.pose_guess, sc.stepover_m())?)
    }

    fn guard(&self, action: &OperatorAction) -> Result<(), SessionError> {
        if valid_actions(self.workflow, self.phase).contains(&action.name()) {
            Ok(())
        } else {
            Err(SessionError::InvalidAction { phase: self.phase, action: action.name().to_string() })
        }
    }

    fn reject(action: &OperatorAction, reason: impl Into<String>) -> SessionError {
        SessionError::Rejected { action: action.name().to_string(), reason: reason.into() }
    }

    /// Applies one operator action. On error the session is unchanged.
    pub fn apply(&mut self, action: &OperatorAction) -> Result<(), SessionError> {
        self.guard(action)?;
        use OperatorAction as A;
        match action {
            A::MoveRobot { q } => {
                let q = JointConfig(q.clone());
                self.robot.check_limits(&q)?;
                self.record("action", json!({ "action": action }));
                self.config = q;
            }
            A::Scan => {
                let cloud = self.run_scan()?;
                self.record("action", json!({ "action": action }));
                self.scans += 1;
                self.record("scan", json!({ "points": cloud.len(), "index": self.scans }));
                if self.keep_scans {
                    self.scan_history.push(cloud.clone());
                }
                self.scan = Some(cloud);
                self.set_phase(Phase::Scanning);
            }
            A::ScanComplete => {
                self.record("action", json!({ "action": action }));
                match self.workflow {
                    WorkflowKind::Structured => {
                        self.set_phase(Phase::Registering);
                        let init = self.pose_guess;
                        self.register_from(&init);
                    }
                    WorkflowKind::Unstructured => self.set_phase(Phase::ReachabilityReview),
                }
            }
            A::SelectGeometry { id } => {
                if self.scenario.geometry(id).is_none() {
                    return Err(TaskError::UnknownGeometry(id.clone()).into());
                }
                let program = if self.program.as_ref().is_some_and(|p| &p.geometry_id == id) {
                    self.program.clone()
                } else {
                    Some(self.load_program(id)?)
                };
                self.record("action", json!({ "action": action }));
                self.geometry_id = id.clone();
                self.program = program;
                let init = self.pose_guess;
                self.register_from(&init);
            }
            A::NudgePose { nudge } => {
                let reg = self.registration.as_ref().ok_or_else(|| Self::reject(action, "no fit to adjust"))?;
                if !nudge.is_finite() {
                    return Err(Self::reject(action, "nudge must be finite"));
                }
                let cloud = self.scan.as_ref().ok_or_else(|| Self::reject(action, "no scan"))?;
                let geom = self.model_geometry();
                let adjusted = apply_manual_adjustment(reg, nudge, cloud, &geom, &self.scenario.registration)?;
                self.record("action", json!({ "action": action }));
                self.registration = Some(adjusted);
                self.record_registration("registration_adjusted");
            }
            A::AutoFit => {
                let init = self.registration.as_ref().map_or(self.pose_guess, |r| r.object_pose);
                self.record("action", json!({ "action": action }));
                self.register_from(&init);
            }
            A::ConfirmFit => {
                let reg = self.registration.as_ref().ok_or_else(|| Self::reject(action, "no fit to confirm"))?;
                let confirmed = confirm_fit(reg)?;
                let program = self.program.as_ref().ok_or_else(|| Self::reject(action, "no task model"))?;
                let moved = reposition_object(program, &confirmed)?;
                let checked = segment_reachability(&moved, &self.reachability(), self.par)?;
                self.record("action", json!({ "action": action }));
                self.pose_guess = confirmed.object_pose;
                self.registration = Some(confirmed);
                self.record_registration("registration_confirmed");
                self.program = Some(checked);
                self.record_reachability();
                self.set_phase(Phase::ReachabilityReview);
            }
            A::SetMarkers { markers } => {
                let camera = self.robot.camera_pose(&self.config)?;
                let quad = project_markers(markers, &camera, &self.scenario.scan.camera, &self.grid)?;
                let (program, preview) = self.plan_unstructured(&quad, &self.params)?;
                self.record("action", json!({ "action": action }));
                self.markers = Some(*markers);
                self.quad = Some(quad);
                self.reach_preview = preview;
                self.program = Some(program);
                self.record("markers", json!({
                    "quad": quad,
                    "preview_reachable": self.reach_preview.iter().filter(|(_, s)| s.is_reachable()).count(),
                    "preview_points": self.reach_preview.len(),
                }));
                self.record_reachability();
                if self.phase != Phase::ReachabilityReview {
                    self.set_phase(Phase::ReachabilityReview);
                }
            }
            A::SetParameters { parameters } => {
                let params = parameters.clamped(self.scenario.calibration.pitch_max_rad);
                let planned = match &self.quad {
                    Some(q) => Some(self.plan_unstructured(q, &params)?),
                    None => None,
                };
                self.record("action", json!({ "action": action }));
                self.params = params;
                self.record("parameters", json!({ "parameters": params }));
                if let Some((program, preview)) = planned {
                    self.program = Some(program);
                    self.reach_preview = preview;
                    self.record_reachability();
                }
                if self.phase != Phase::ReachabilityReview {
                    self.set_phase(Phase::ReachabilityReview);
                }
            }
            A::Start => {
                let program = self.program.as_ref().ok_or_else(|| Self::reject(action, "no task program"))?;
                if !program.pose_confirmed {
                    return Err(TaskError::UnconfirmedRegistration.into());
                }
                let order: Vec<usize> = program
                    .segments
                    .iter()
                    .filter(|s| s.status == SegmentStatus::Reachable)
                    .map(|s| s.id)
                    .collect();
                if order.is_empty() {
                    return Err(Self::reject(action, "no reachable segments"));
                }
                self.record("action", json!({ "action": action }));
                self.cursor = Cursor { segment: order[0], arc_m: 0.0 };
                self.record("run_start", json!({ "segments": order }));
                self.run = Some(RunState { order, pos: 0 });
                self.set_phase(Phase::Executing);
            }
            A::Pause => {
                self.record("action", json!({ "action": action }));
                self.set_phase(Phase::Paused);
            }
            A::Resume => {
                self.record("action", json!({ "action": action }));
                self.set_phase(Phase::Executing);
            }
            A::ChangeSandpaper => {
                self.record("action", json!({ "action": action }));
                self.record("sandpaper_change_start", json!({
                    "usage_s": self.paper.usage_seconds,
                    "efficiency": self.paper.efficiency,
                }));
                if let Some(q) = &self.scenario.sandpaper_change_config {
                    self.parked_config = Some(std::mem::replace(&mut self.config, q.clone()));
                }
                self.set_phase(Phase::SandpaperChange);
            }
            A::SandpaperChanged => {
                self.record("action", json!({ "action": action }));
                self.paper = change_sandpaper(&self.paper);
                self.sandpaper_changes += 1;
                if let Some(q) = self.parked_config.take() {
                    self.config = q;
                }
                self.record("sandpaper_change_end", json!({ "efficiency": self.paper.efficiency }));
                self.set_phase(Phase::Executing);
            }
            A::Reposition { rotate_z_deg, translate_m } => {
                if !(rotate_z_deg.is_finite() && translate_m.iter().all(|t| t.is_finite())) {
                    return Err(Self::reject(action, "reposition must be finite"));
                }
                self.record("action", json!({ "action": action }));
                self.end_run();
                let angle = rotate_z_deg.to_radians();
                let t = nalgebra::Vector3::from(*translate_m);
                let moved = self.grid.object_pose.rotated_about_own_z(angle, t);
                self.grid.object_pose = self.scenario.reposition_error.apply(&moved);
                self.pose_guess = self.pose_guess.rotated_about_own_z(angle, t);
                self.registration = None;
                self.scan = None;
                if let Some(p) = &mut self.program {
                    p.pose_confirmed = false;
                    for seg in &mut p.segments {
                        if seg.status != SegmentStatus::Completed {
                            seg.status = SegmentStatus::Reachable;
                        }
                    }
                }
                self.set_phase(Phase::Repositioning);
            }
        }
        Ok(())
    }

    fn model_geometry(&self) -> crate::workpiece::SurfaceGeometry {
        *self.scenario.geometry(&self.geometry_id).expect("selected geometry exists")
    }

    fn run_scan(&self) -> Result<PointCloud, SessionError> {
        let sc = &self.scenario;
        let pans: Vec<JointConfig> = sc
            .scan
            .pan_offsets
            .iter()
            .map(|off| {
                JointConfig(
                    self.config
                        .0
                        .iter()
                        .zip(off)
                        .zip(&self.robot.joint_limits)
                        .map(|((q, o), [lo, hi])| (q + o).clamp(*lo, *hi))
                        .collect(),
                )
            })
            .collect();
        let seed = self.seed ^ (self.scans + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let scan = simulate_scan(&self.robot, &self.grid, &pans, &sc.scan.camera, sc.scan.noise_sigma_m, seed, self.par)?;
        Ok(scan.cloud)
    }

    /// Automatic fit from `init`. A failed fit leaves no result; the operator
    /// can switch geometry or retry.
    fn register_from(&mut self, init: &Pose) {
        let Some(cloud) = &self.scan else { return };
        let geom = self.model_geometry();
        match auto_register(cloud, &geom, init, &self.scenario.registration) {
            Ok(r) => {
                self.registration = Some(r);
                self.record_registration("registration");
            }
            Err(e) => {
                self.registration = None;
                self.record("registration_failed", json!({ "reason": e.to_string() }));
            }
        }
    }

    fn record_registration(&mut self, event: &str) {
        let Some(r) = &self.registration else { return };
        let payload = json!({
            "geometry": self.geometry_id,
            "rms_residual_m": r.rms_residual,
            "inlier_fraction": r.inlier_fraction,
            "plausible": r.plausible(&self.scenario.registration),
            "iterations": r.iterations,
            "weak_dofs": r.weak_dofs,
            "pose": r.object_pose,
        });
        self.record(event, payload);
    }

    fn record_reachability(&mut self) {
        let Some(p) = &self.program else { return };
        let payload = json!({
            "statuses": p.statuses(),
            "completed": p.count(SegmentStatus::Completed),
            "reachable": p.count(SegmentStatus::Reachable),
            "unreachable": p.count(SegmentStatus::Unreachable),
        });
        self.record("reachability", payload);
    }

    #[allow(clippy::type_complexity)]
    fn plan_unstructured(
        &self,
        quad: &SurfaceQuad,
        params: &NominalParameters,
    ) -> Result<(TaskProgram, Vec<([f64; 2], ReachabilityStatus)>), SessionError> {
        let sc = &self.scenario;
        let program = generate_raster(quad, params, &self.grid, sc.stepover_m(), sc.calibration.pitch_max_rad)?;
        let reach = self.reachability();
        let program = segment_reachability(&program, &reach, self.par)?;
        let preview = quad_reachability(quad, &self.grid, &reach, sc.unstructured.preview_spacing_m, self.par)?;
        Ok((program, preview))
    }

    fn end_run(&mut self) {
        if self.run.take().is_some() {
            self.record("run_end", json!({ "cursor": self.cursor }));
        }
    }

    /// Advances the clock outside execution (operator think time, disc changes).
    pub fn idle(&mut self, seconds: f64) -> Result<(), SessionError> {
        if self.phase == Phase::Executing {
            return Err(SessionError::InvalidAction { phase: self.phase, action: "idle".into() });
        }
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(SessionError::InvalidDt(seconds));
        }
        self.clock_s += seconds;
        Ok(())
    }

    /// One control step of the sanding loop.
    pub fn tick(&mut self, input: &CorrectionInput, dt: f64) -> Result<TickReport, SessionError> {
        if self.phase != Phase::Executing {
            return Err(SessionError::NotExecuting(self.phase));
        }
        if !(dt > 0.0 && dt <= MAX_TICK_DT) {
            return Err(SessionError::InvalidDt(dt));
        }
        let sc = Arc::clone(&self.scenario);
        let program = self.program.as_ref().expect("executing sessions have a program");
        let seg = &program.segments[self.cursor.segment];
        let nominal = CommandVector {
            feed_scale: 1.0,
            force_n: seg.nominal.force_n,
            pitch_rad: seg.nominal.pitch_rad,
            lateral_mm: 0.0,
        };
        let a = &sc.autonomy;
        let x = command(&nominal, input, &a.saturation, &a.coupling, &a.safety);
        self.tracked_force_n = track_force(self.tracked_force_n, x.force_n, dt, sc.force_tau_s);

        let (uv_est, heading) = seg.sample(self.cursor.arc_m);
        let world = program.object_pose.transform_point(&self.model_geometry().point(uv_est[0], uv_est[1]));
        let mut uv = self.grid.locate(&world).uv;
        let lateral = x.lateral_mm * 1e-3;
        uv[0] -= lateral * heading[1];
        uv[1] += lateral * heading[0];
        let [hu, hv] = self.grid.geometry.half_extent();
        uv = [uv[0].clamp(-hu, hu), uv[1].clamp(-hv, hv)];

        let feed = seg.nominal.feed_mm_s;
        let rate = backtrack_rate(input, feed, x.feed_scale);
        let dir = if rate < 0.0 { -1.0 } else { 1.0 };
        let pitch_max = sc.calibration.pitch_max_rad;
        let contact = ToolContact {
            center_uv: uv,
            heading_uv: [dir * heading[0], dir * heading[1]],
            normal_force_n: self.tracked_force_n.max(0.0),
            tangential_speed_mm_s: rate.abs(),
            pitch_rad: x.pitch_rad.clamp(-pitch_max, pitch_max),
            engaged: true,
        };
        let report = removal_step(&mut self.grid, &contact, &self.paper, dt, &sc.calibration)?;
        self.removal_steps += 1;
        self.paper = wear_update(&self.paper, dt, true, &sc.calibration)?;
        self.clock_s += dt;
        self.ticks += 1;
        self.last_command = x;
        self.tool_uv = Some(uv);

        let finished = self.advance(rate * 1e-3 * dt);
        let per_second = (1.0 / dt).round().max(1.0) as u64;
        if self.ticks.is_multiple_of(per_second) {
            self.record("progress", json!({
                "cursor": self.cursor,
                "command": x,
                "tracked_force_n": self.tracked_force_n,
                "efficiency": self.paper.efficiency,
            }));
        }
        if finished {
            self.record("run_complete", json!({ "cursor": self.cursor }));
            self.run = None;
            self.set_phase(Phase::Complete);
        }
        Ok(TickReport { command: x, removed_mm3: report.removed_mm3, finished })
    }

    /// Moves the cursor by `ds` meters along the run. Crossing a segment end
    /// going forward completes it; backing into a segment finished in this
    /// run re-opens it. Returns true when the run is done.
    fn advance(&mut self, ds: f64) -> bool {
        let mut run = self.run.take().expect("executing sessions have a run");
        let program = self.program.as_mut().expect("executing sessions have a program");
        let mut arc = self.cursor.arc_m + ds;
        let mut events = Vec::new();
        let mut finished = false;
        loop {
            let id = run.order[run.pos];
            let len = program.segments[id].length();
            if arc > len || (ds > 0.0 && arc >= len) {
                program.segments[id].status = SegmentStatus::Completed;
                events.push(("segment_completed", id));
                if run.pos + 1 < run.order.len() {
                    run.pos += 1;
                    arc -= len;
                    continue;
                }
                arc = len;
                finished = true;
            } else if arc < 0.0 {
                if run.pos == 0 {
                    arc = 0.0;
                } else {
                    run.pos -= 1;
                    let prev = run.order[run.pos];
                    program.segments[prev].status = SegmentStatus::Reachable;
                    events.push(("segment_reopened", prev));
                    arc += program.segments[prev].length();
                    continue;
                }
            }
            break;
        }
        self.cursor = Cursor { segment: run.order[run.pos], arc_m: arc };
        self.run = Some(run);
        for (name, id) in events {
            self.record(name, json!({ "segment": id }));
        }
        finished
    }

    /// Cells strictly inside the marker quad.
    pub fn quad_mask(&self) -> Option<Vec<bool>> {
        let q = self.quad?;
        Some((0..self.grid.len()).map(|i| q.contains(self.grid.cell_uv_index(i))).collect())
    }

    pub fn coverage(&self) -> CoverageMetrics {
        coverage_metrics(&self.grid, &self.scenario.calibration)
    }

    pub fn quad_coverage(&self) -> Option<CoverageMetrics> {
        self.quad_mask().map(|m| coverage_metrics_masked(&self.grid, &self.scenario.calibration, &m))
    }

    pub fn segment_counts(&self) -> SegmentCounts {
        self.program.as_ref().map_or_else(SegmentCounts::default, |p| SegmentCounts {
            completed: p.count(SegmentStatus::Completed),
            reachable: p.count(SegmentStatus::Reachable),
            unreachable: p.count(SegmentStatus::Unreachable),
        })
    }

    fn registration_scores(&self) -> Option<RegistrationScores> {
        self.registration.as_ref().map(|r| RegistrationScores {
            rms_residual_m: r.rms_residual,
            inlier_fraction: r.inlier_fraction,
            plausible: r.plausible(&self.scenario.registration),
            accepted: r.accepted,
            iterations: r.iterations,
            weak_dofs: r.weak_dofs,
        })
    }

    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            phase: self.phase,
            coverage: self.coverage(),
            quad_coverage: self.quad_coverage(),
            segments: self.segment_counts(),
            clock_s: self.clock_s,
            ticks: self.ticks,
            removal_steps: self.removal_steps,
            sandpaper_changes: self.sandpaper_changes,
            sandpaper: self.paper,
            registration: self.registration_scores(),
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            scenario: self.scenario.name.clone(),
            workflow: self.workflow,
            phase: self.phase,
            valid_actions: valid_actions(self.workflow, self.phase).iter().map(|s| s.to_string()).collect(),
            clock_s: self.clock_s,
            cursor: self.cursor,
            segments: self
                .program
                .iter()
                .flat_map(|p| &p.segments)
                .map(|s| SegmentView { id: s.id, status: s.status, color: s.status.color().into() })
                .collect(),
            sandpaper: self.paper,
            tracked_force_n: self.tracked_force_n,
            command: self.last_command,
            tool_uv: self.tool_uv,
            coverage: self.coverage(),
            quad_coverage: self.quad_coverage(),
            registration: self.registration_scores(),
            geometry_id: self.geometry_id.clone(),
            geometries: self.scenario.geometries.iter().map(|g| g.id.clone()).collect(),
            parameters: self.params,
            markers: self.markers,
            quad: self.quad,
            reachability_grid: self
                .reach_preview
                .iter()
                .map(|(uv, s)| GridPointView { uv: *uv, status: *s, color: s.color().into() })
                .collect(),
            robot_config: self.config.0.clone(),
        }
    }
}
