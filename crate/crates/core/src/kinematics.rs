//! Serial-arm model: Denavit–Hartenberg forward kinematics, damped
//! least-squares inverse kinematics and point-wise reachability.

use nalgebra::{
    Isometry3, Matrix3, Matrix6, Matrix6xX, Point3, Rotation3, Translation3, UnitQuaternion,
    Vector3, Vector6,
};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::pose::Pose;

const FRANKA_JSON: &str = include_str!("../data/franka.json");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint {index} = {value} outside limits [{lo}, {hi}]")]
    JointLimitViolation { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("joint {0} is not finite")]
    NonFiniteJoint(usize),
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reachability query needs at least one seed configuration")]
    EmptySeeds,
    #[error("surface normal {0} is not unit length")]
    NonUnitNormal(usize),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("robot model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DhConvention {
    /// Craig: `RotX(alpha) TransX(a) RotZ(theta) TransZ(d)`.
    Modified,
    /// Classic: `RotZ(theta) TransZ(d) TransX(a) RotX(alpha)`.
    Standard,
}

/// One revolute joint's DH row. Lengths in meters, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DhRow {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

fn rot_x(angle: f64) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angle),
    )
}

fn rot_z(angle: f64) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle),
    )
}

fn trans(x: f64, y: f64, z: f64) -> Isometry3<f64> {
    Isometry3::translation(x, y, z)
}

impl DhRow {
    /// Fixed part applied before the joint rotation; its z axis is the joint axis.
    fn pre(&self, convention: DhConvention) -> Isometry3<f64> {
        match convention {
            DhConvention::Modified => rot_x(self.alpha) * trans(self.a, 0.0, 0.0),
            DhConvention::Standard => Isometry3::identity(),
        }
    }

    fn post(&self, convention: DhConvention) -> Isometry3<f64> {
        match convention {
            DhConvention::Modified => trans(0.0, 0.0, self.d),
            DhConvention::Standard => {
                trans(0.0, 0.0, self.d) * trans(self.a, 0.0, 0.0) * rot_x(self.alpha)
            }
        }
    }

    pub fn transform(&self, convention: DhConvention, theta: f64) -> Isometry3<f64> {
        self.pre(convention) * rot_z(theta + self.theta_offset) * self.post(convention)
    }
}

/// Joint positions in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn new(angles: Vec<f64>) -> Self {
        JointConfig(angles)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        JointConfig(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ReachabilityStatus {
    Reachable,
    Unreachable,
}

impl ReachabilityStatus {
    /// Display color used by the reachability grid overlay.
    pub fn color(self) -> &'static str {
        match self {
            ReachabilityStatus::Reachable => "green",
            ReachabilityStatus::Unreachable => "red",
        }
    }

    pub fn is_reachable(self) -> bool {
        self == ReachabilityStatus::Reachable
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub name: String,
    pub convention: DhConvention,
    pub links: Vec<DhRow>,
    /// Per-joint `[lo, hi]`, radians.
    pub joint_limits: Vec<[f64; 2]>,
    /// Distal link frame to sander disc center.
    pub tool_transform: Pose,
    /// Distal link frame to depth camera (z forward, x right, y down).
    pub camera_transform: Pose,
    /// Robot base in world.
    pub base_pose: Pose,
    pub home: JointConfig,
    /// Extra IK seeds (elbow/wrist variants) used by reachability queries.
    #[serde(default)]
    pub seed_configs: Vec<JointConfig>,
}

impl RobotModel {
    pub fn from_json_str(s: &str) -> Result<Self, KinematicsError> {
        let model: RobotModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    /// The default 7-DOF arm with sander and wrist camera.
    pub fn franka() -> Self {
        Self::from_json_str(FRANKA_JSON).expect("bundled robot model is valid")
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let n = self.links.len();
        if n == 0 {
            return Err(KinematicsError::InvalidModel("no links".into()));
        }
        if self.joint_limits.len() != n {
            return Err(KinematicsError::InvalidModel(format!(
                "{} joint limits for {} links",
                self.joint_limits.len(),
                n
            )));
        }
        for (i, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i} limits [{lo}, {hi}] are not an interval"
                )));
            }
        }
        for row in &self.links {
            if ![row.a, row.d, row.alpha, row.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(KinematicsError::InvalidModel("non-finite DH parameter".into()));
            }
        }
        self.check_limits(&self.home)?;
        for seed in &self.seed_configs {
            self.check_limits(seed)?;
        }
        Ok(())
    }

    /// Rejects (never clamps) configurations outside the joint limits.
    pub fn check_limits(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        for (index, (&value, &[lo, hi])) in q.0.iter().zip(&self.joint_limits).enumerate() {
            if !value.is_finite() {
                return Err(KinematicsError::NonFiniteJoint(index));
            }
            if value < lo || value > hi {
                return Err(KinematicsError::JointLimitViolation { index, value, lo, hi });
            }
        }
        Ok(())
    }

    /// Joint-axis frames (z = rotation axis) and the distal link frame, in world.
    fn chain(&self, q: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        let mut t = *self.base_pose.iso();
        let mut axes = Vec::with_capacity(self.links.len());
        for (row, &qi) in self.links.iter().zip(q) {
            t *= row.pre(self.convention);
            axes.push(t);
            t = t * rot_z(qi + row.theta_offset) * row.post(self.convention);
        }
        (axes, t)
    }

    fn tool_pose_unchecked(&self, q: &[f64]) -> Isometry3<f64> {
        let (_, distal) = self.chain(q);
        distal * self.tool_transform.iso()
    }

    /// World pose of the sander disc center.
    pub fn forward_kinematics(&self, q: &JointConfig) -> Result<Pose, KinematicsError> {
        self.check_limits(q)?;
        Ok(self.tool_pose_unchecked(&q.0).into())
    }

    /// World pose of the depth camera.
    pub fn camera_pose(&self, q: &JointConfig) -> Result<Pose, KinematicsError> {
        self.check_limits(q)?;
        let (_, distal) = self.chain(&q.0);
        Ok((distal * self.camera_transform.iso()).into())
    }

    /// Geometric Jacobian at the tool point; rows are (linear xyz, angular xyz).
    pub fn jacobian(&self, q: &JointConfig) -> Result<Matrix6xX<f64>, KinematicsError> {
        self.check_limits(q)?;
        Ok(self.jacobian_unchecked(&q.0).1)
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> (Isometry3<f64>, Matrix6xX<f64>) {
        let (axes, distal) = self.chain(q);
        let tool = distal * self.tool_transform.iso();
        let p_tool = tool.translation.vector;
        let mut jac = Matrix6xX::zeros(q.len());
        for (i, frame) in axes.iter().enumerate() {
            let z = frame.rotation * Vector3::z();
            let lin = z.cross(&(p_tool - frame.translation.vector));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        (tool, jac)
    }

    /// Home plus the configured elbow/wrist variants.
    pub fn default_seeds(&self) -> Vec<JointConfig> {
        std::iter::once(self.home.clone())
            .chain(self.seed_configs.iter().cloned())
            .collect()
    }

    /// Sum of link lengths, an upper bound on reach from the first joint.
    pub fn max_reach(&self) -> f64 {
        let links: f64 = self.links.iter().map(|r| r.a.abs() + r.d.abs()).sum();
        links + self.tool_transform.position().norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iterations: usize,
    /// Meters.
    pub position_tolerance: f64,
    /// Radians.
    pub orientation_tolerance: f64,
    /// Per-iteration clamp on the task-space position error, meters.
    pub max_position_step: f64,
    /// Per-iteration clamp on the task-space orientation error, radians.
    pub max_orientation_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            damping: 0.01,
            max_iterations: 200,
            position_tolerance: 1e-3,
            orientation_tolerance: 1e-2,
            max_position_step: 0.1,
            max_orientation_step: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    pub iterations: usize,
    pub position_error: f64,
    pub orientation_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IkOutcome {
    Converged(IkSolution),
    /// Iteration budget exhausted or limits unsatisfiable.
    NotReachable,
}

impl IkOutcome {
    pub fn solution(&self) -> Option<&IkSolution> {
        match self {
            IkOutcome::Converged(s) => Some(s),
            IkOutcome::NotReachable => None,
        }
    }

    pub fn is_converged(&self) -> bool {
        matches!(self, IkOutcome::Converged(_))
    }
}

fn pose_error(target: &Isometry3<f64>, current: &Isometry3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let ep = target.translation.vector - current.translation.vector;
    let eo = (target.rotation * current.rotation.inverse()).scaled_axis();
    (ep, eo)
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Damped least-squares IK with joint-limit projection every iteration.
pub fn solve_ik(
    robot: &RobotModel,
    target: &Pose,
    seed: &JointConfig,
    cfg: &IkConfig,
) -> Result<IkOutcome, KinematicsError> {
    robot.check_limits(seed)?;
    let target = target.iso();
    let lambda2 = cfg.damping * cfg.damping;
    let mut q = seed.0.clone();

    for iteration in 0..=cfg.max_iterations {
        let (tool, jac) = robot.jacobian_unchecked(&q);
        let (ep, eo) = pose_error(target, &tool);
        let (pn, on) = (ep.norm(), eo.norm());
        if pn < cfg.position_tolerance && on < cfg.orientation_tolerance {
            return Ok(IkOutcome::Converged(IkSolution {
                q: JointConfig(q),
                iterations: iteration,
                position_error: pn,
                orientation_error: on,
            }));
        }
        if iteration == cfg.max_iterations {
            break;
        }
        let ep = clamp_norm(ep, cfg.max_position_step);
        let eo = clamp_norm(eo, cfg.max_orientation_step);
        let e = Vector6::new(ep.x, ep.y, ep.z, eo.x, eo.y, eo.z);
        let jjt: Matrix6<f64> = &jac * jac.transpose() + Matrix6::identity() * lambda2;
        let Some(chol) = jjt.cholesky() else { break };
        let dq = jac.transpose() * chol.solve(&e);
        for ((qi, dqi), &[lo, hi]) in q.iter_mut().zip(dq.iter()).zip(&robot.joint_limits) {
            *qi = (*qi + dqi).clamp(lo, hi);
        }
    }
    Ok(IkOutcome::NotReachable)
}

/// Reachable iff IK converges from any seed. Seeds are tried in order and the
/// first success short-circuits, which cannot change the status.
pub fn is_reachable(
    robot: &RobotModel,
    target: &Pose,
    seeds: &[JointConfig],
    cfg: &IkConfig,
) -> Result<ReachabilityStatus, KinematicsError> {
    if seeds.is_empty() {
        return Err(KinematicsError::EmptySeeds);
    }
    for seed in seeds {
        if solve_ik(robot, target, seed, cfg)?.is_converged() {
            return Ok(ReachabilityStatus::Reachable);
        }
    }
    Ok(ReachabilityStatus::Unreachable)
}

/// A point on a workpiece surface where the tool should sit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceTarget {
    pub point: Point3<f64>,
    /// Outward unit surface normal.
    pub normal: Vector3<f64>,
    /// Path direction, if known.
    pub tangent: Option<Vector3<f64>>,
}

/// Tool pose for a surface contact: disc center on the point, tool z
/// anti-parallel to the normal, tool x along the tangent (else world x
/// projected into the contact plane).
pub fn tool_pose_for_surface(point: &Point3<f64>, normal: &Vector3<f64>, tangent: Option<&Vector3<f64>>) -> Pose {
    let z = -normal.normalize();
    let project = |v: &Vector3<f64>| {
        let p = v - z * z.dot(v);
        let n = p.norm();
        (n > 1e-9).then(|| p / n)
    };
    let x = tangent
        .and_then(project)
        .or_else(|| project(&Vector3::x()))
        .or_else(|| project(&Vector3::y()))
        .expect("x or y is never parallel to a unit z");
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Pose::new(point.coords, UnitQuaternion::from_rotation_matrix(&rot))
}

/// Reachability oracle bundling a robot, its seed set and IK settings.
#[derive(Clone, Debug)]
pub struct Reachability<'a> {
    pub robot: &'a RobotModel,
    pub seeds: Vec<JointConfig>,
    pub ik: IkConfig,
}

impl<'a> Reachability<'a> {
    pub fn new(robot: &'a RobotModel) -> Self {
        Reachability { robot, seeds: robot.default_seeds(), ik: IkConfig::default() }
    }

    pub fn with_ik(mut self, ik: IkConfig) -> Self {
        self.ik = ik;
        self
    }

    pub fn status(&self, target: &Pose) -> Result<ReachabilityStatus, KinematicsError> {
        is_reachable(self.robot, target, &self.seeds, &self.ik)
    }

    pub fn statuses(&self, targets: &[Pose], par: Parallelism) -> Result<Vec<ReachabilityStatus>, KinematicsError> {
        par.map(targets, |t| self.status(t)).into_iter().collect()
    }

    pub fn grid(
        &self,
        points: &[SurfaceTarget],
        standoff: &Pose,
        par: Parallelism,
    ) -> Result<Vec<ReachabilityStatus>, KinematicsError> {
        for (i, p) in points.iter().enumerate() {
            if (p.normal.norm() - 1.0).abs() > 1e-6 {
                return Err(KinematicsError::NonUnitNormal(i));
            }
        }
        let poses: Vec<Pose> = points
            .iter()
            .map(|p| tool_pose_for_surface(&p.point, &p.normal, p.tangent.as_ref()) * *standoff)
            .collect();
        self.statuses(&poses, par)
    }
}

/// Point-wise reachability of surface contacts, using the robot's default seeds.
pub fn reachability_grid(
    robot: &RobotModel,
    points: &[SurfaceTarget],
    standoff: &Pose,
) -> Result<Vec<ReachabilityStatus>, KinematicsError> {
    Reachability::new(robot).grid(points, standoff, Parallelism::default())
}
