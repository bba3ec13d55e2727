//! Simulated depth scanning and operator-verified registration of a known
//! surface model against the scanned cloud.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix6, Point3, SymmetricEigen, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};
use crate::pose::Pose;
use crate::workpiece::{SurfaceGeometry, SurfaceGrid};

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("scan produced no surface hits")]
    EmptyScan,
    #[error("scan needs at least one pan pose")]
    NoPanPoses,
    #[error("registration needs at least {min} points, got {got}")]
    TooFewPoints { got: usize, min: usize },
    #[error("correspondence set is degenerate (rank {rank} of 6)")]
    DegenerateCloud { rank: usize },
    #[error("fit has already been accepted")]
    AlreadyAccepted,
    #[error("no candidate geometries")]
    NoCandidates,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Pinhole depth camera. Camera frame: z forward, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    pub min_range_m: f64,
    pub max_range_m: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            width: 640,
            height: 576,
            fov_h_deg: 75.0,
            fov_v_deg: 65.0,
            min_range_m: 0.25,
            max_range_m: 2.5,
        }
    }
}

impl CameraIntrinsics {
    pub fn focal(&self) -> (f64, f64) {
        let fx = 0.5 * self.width as f64 / (0.5 * self.fov_h_deg.to_radians()).tan();
        let fy = 0.5 * self.height as f64 / (0.5 * self.fov_v_deg.to_radians()).tan();
        (fx, fy)
    }

    /// Unnormalised camera-frame ray through pixel coordinates (z = 1).
    pub fn ray(&self, px: f64, py: f64) -> Vector3<f64> {
        let (fx, fy) = self.focal();
        Vector3::new(
            (px - 0.5 * self.width as f64) / fx,
            (py - 0.5 * self.height as f64) / fy,
            1.0,
        )
    }

    /// Pixel coordinates of a camera-frame point, if in front of the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        if p.z <= 0.0 {
            return None;
        }
        let (fx, fy) = self.focal();
        Some([
            fx * p.x / p.z + 0.5 * self.width as f64,
            fy * p.y / p.z + 0.5 * self.height as f64,
        ])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    /// Robot base frame, meters.
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| pose.transform_point(p)).collect() }
    }

    pub fn to_ply_ascii(&self) -> String {
        let mut s = String::with_capacity(64 + self.points.len() * 40);
        let _ = write!(
            s,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            self.points.len()
        );
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub cloud: PointCloud,
    pub hits_per_pose: Vec<usize>,
}

/// Renders the workpiece from each pan pose and merges the hits. Ray casting
/// runs per image row under `par`; noise is drawn afterwards in point order so
/// the result does not depend on the execution mode.
pub fn simulate_scan(
    robot: &RobotModel,
    grid: &SurfaceGrid,
    pan_poses: &[JointConfig],
    camera: &CameraIntrinsics,
    noise_sigma: f64,
    seed: u64,
    par: Parallelism,
) -> Result<Scan, PerceptionError> {
    if pan_poses.is_empty() {
        return Err(PerceptionError::NoPanPoses);
    }
    let cams = pan_poses
        .iter()
        .map(|q| robot.camera_pose(q))
        .collect::<Result<Vec<_>, _>>()?;
    let to_object = grid.object_pose.inverse();
    let mut points = Vec::new();
    let mut hits_per_pose = Vec::with_capacity(cams.len());
    for cam in &cams {
        let cam_obj = to_object.compose(cam);
        let origin = Point3::from(cam_obj.position());
        let rows = par.map_range(camera.height, |py| {
            let mut row = Vec::new();
            for px in 0..camera.width {
                let ray_cam = camera.ray(px as f64 + 0.5, py as f64 + 0.5);
                let dir = cam_obj.transform_vector(&ray_cam);
                // With z = 1 in the camera frame, t is the depth.
                if let Some((t, uv)) = grid.geometry.intersect_ray(&origin, &dir) {
                    if t >= camera.min_range_m && t <= camera.max_range_m {
                        row.push(grid.world_point(uv));
                    }
                }
            }
            row
        });
        let before = points.len();
        points.extend(rows.into_iter().flatten());
        hits_per_pose.push(points.len() - before);
    }
    if points.is_empty() {
        return Err(PerceptionError::EmptyScan);
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma is positive and finite");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut points {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
            p.z += normal.sample(&mut rng);
        }
    }
    Ok(Scan { cloud: PointCloud { points }, hits_per_pose })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub inlier_distance_m: f64,
    pub accept_inlier_fraction: f64,
    pub max_points: usize,
    pub min_points: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 100,
            relative_tolerance: 1e-6,
            inlier_distance_m: 0.005,
            accept_inlier_fraction: 0.8,
            max_points: 4000,
            min_points: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Model frame to robot base frame.
    pub object_pose: Pose,
    pub rms_residual: f64,
    pub inlier_fraction: f64,
    pub accepted: bool,
    pub iterations: usize,
    /// RMS before the first and after each accepted iteration.
    pub residual_history: Vec<f64>,
    /// Pose directions the cloud does not constrain (e.g. in-plane slide).
    pub weak_dofs: usize,
}

impl RegistrationResult {
    /// Whether the automatic score clears the acceptance threshold. The
    /// operator still has to confirm.
    pub fn plausible(&self, cfg: &IcpConfig) -> bool {
        self.inlier_fraction >= cfg.accept_inlier_fraction
    }
}

/// Deterministic stride subsample, order preserved.
fn subsample(cloud: &PointCloud, max_points: usize) -> Vec<Point3<f64>> {
    let n = cloud.points.len();
    if n <= max_points || max_points == 0 {
        return cloud.points.clone();
    }
    let stride = n.div_ceil(max_points);
    cloud.points.iter().step_by(stride).copied().collect()
}

/// RMS point-to-surface distance and inlier fraction of `pose`.
pub fn evaluate_fit(points: &[Point3<f64>], geometry: &SurfaceGeometry, pose: &Pose, cfg: &IcpConfig) -> (f64, f64) {
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let inv = pose.inverse();
    let mut sq = 0.0;
    let mut inliers = 0usize;
    for p in points {
        let m = inv.transform_point(p);
        let d = (m - geometry.closest_point(&m).point).norm();
        sq += d * d;
        if d <= cfg.inlier_distance_m {
            inliers += 1;
        }
    }
    let n = points.len() as f64;
    ((sq / n).sqrt(), inliers as f64 / n)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gauss-Newton step in model-frame coordinates. Interior correspondences use
/// point-to-plane rows; boundary-clamped ones use point-to-point rows.
fn icp_step(points: &[Point3<f64>], geometry: &SurfaceGeometry, pose: &Pose) -> Result<(Vector6<f64>, usize), PerceptionError> {
    let inv = pose.inverse();
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for p in points {
        let m = inv.transform_point(p);
        let cp = geometry.closest_point(&m);
        let d = m - cp.point;
        if cp.clamped {
            // m' = m + t + w x m, residual m' - q.
            let mut j = nalgebra::Matrix3x6::<f64>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&m.coords)));
            h += j.transpose() * j;
            g += j.transpose() * d;
        } else {
            let n = cp.normal;
            let mxn = m.coords.cross(&n);
            let j = Vector6::new(n.x, n.y, n.z, mxn.x, mxn.y, mxn.z);
            h += j * j.transpose();
            g += j * n.dot(&d);
        }
    }
    let eig = SymmetricEigen::new(h);
    let lmax = eig.eigenvalues.amax();
    let cutoff = (lmax * 1e-9).max(1e-12);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > cutoff).count();
    if rank < 3 {
        return Err(PerceptionError::DegenerateCloud { rank });
    }
    let rhs = eig.eigenvectors.transpose() * (-g);
    let mut coeffs = Vector6::zeros();
    for i in 0..6 {
        let l = eig.eigenvalues[i];
        if l > cutoff {
            coeffs[i] = rhs[i] / l;
        }
    }
    Ok((eig.eigenvectors * coeffs, 6 - rank))
}

/// Applies a model-frame increment: points move by `m' = exp(xi) m`, so the
/// object pose becomes `pose * exp(xi)^-1`.
fn apply_step(pose: &Pose, xi: &Vector6<f64>) -> Pose {
    let delta = Pose::from_parts_scaled_axis(xi.fixed_rows::<3>(0).into_owned(), xi.fixed_rows::<3>(3).into_owned());
    pose.compose(&delta.inverse())
}

/// Iterative closest point from `init`. Every accepted iteration does not
/// increase the RMS residual.
pub fn auto_register(
    cloud: &PointCloud,
    geometry: &SurfaceGeometry,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<RegistrationResult, PerceptionError> {
    if cloud.len() < cfg.min_points {
        return Err(PerceptionError::TooFewPoints { got: cloud.len(), min: cfg.min_points });
    }
    let points = subsample(cloud, cfg.max_points);
    let mut pose = *init;
    let (mut rms, _) = evaluate_fit(&points, geometry, &pose, cfg);
    let mut history = vec![rms];
    let mut weak = 0;
    let mut iterations = 0;
    while iterations < cfg.max_iterations && rms > 1e-12 {
        let (xi, w) = icp_step(&points, geometry, &pose)?;
        weak = w;
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let candidate = apply_step(&pose, &(xi * alpha));
            let (r, _) = evaluate_fit(&points, geometry, &candidate, cfg);
            if r <= rms {
                accepted = Some((candidate, r));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, r)) = accepted else { break };
        iterations += 1;
        let improvement = (rms - r) / rms;
        pose = next;
        rms = r;
        history.push(r);
        if improvement < cfg.relative_tolerance {
            break;
        }
    }
    let (rms, inlier_fraction) = evaluate_fit(&points, geometry, &pose, cfg);
    Ok(RegistrationResult {
        object_pose: pose,
        rms_residual: rms,
        inlier_fraction,
        accepted: false,
        iterations,
        residual_history: history,
        weak_dofs: weak,
    })
}

/// Operator pose nudge: a world-frame translation and a rotation about the
/// object origin (world axes, scaled-axis radians).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNudge {
    pub translation_m: [f64; 3],
    pub rotation_rad: [f64; 3],
}

impl PoseNudge {
    pub fn inverse(&self) -> PoseNudge {
        let r = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::from(self.rotation_rad)).inverse();
        let s = r.scaled_axis();
        PoseNudge {
            translation_m: self.translation_m.map(|t| -t),
            rotation_rad: [s.x, s.y, s.z],
        }
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        let r = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::from(self.rotation_rad));
        Pose::new(pose.position() + Vector3::from(self.translation_m), r * pose.orientation())
    }

    pub fn is_finite(&self) -> bool {
        self.translation_m.iter().chain(&self.rotation_rad).all(|v| v.is_finite())
    }
}

pub fn apply_manual_adjustment(
    result: &RegistrationResult,
    nudge: &PoseNudge,
    cloud: &PointCloud,
    geometry: &SurfaceGeometry,
    cfg: &IcpConfig,
) -> Result<RegistrationResult, PerceptionError> {
    if result.accepted {
        return Err(PerceptionError::AlreadyAccepted);
    }
    let pose = nudge.apply(&result.object_pose);
    let (rms, inliers) = evaluate_fit(&subsample(cloud, cfg.max_points), geometry, &pose, cfg);
    Ok(RegistrationResult {
        object_pose: pose,
        rms_residual: rms,
        inlier_fraction: inliers,
        ..result.clone()
    })
}

pub fn confirm_fit(result: &RegistrationResult) -> Result<RegistrationResult, PerceptionError> {
    if result.accepted {
        return Err(PerceptionError::AlreadyAccepted);
    }
    Ok(RegistrationResult { accepted: true, ..result.clone() })
}

/// Registers every candidate and returns them best residual first.
pub fn select_geometry(
    cloud: &PointCloud,
    candidates: &[(String, SurfaceGeometry)],
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<Vec<(String, RegistrationResult)>, PerceptionError> {
    if candidates.is_empty() {
        return Err(PerceptionError::NoCandidates);
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for (id, geom) in candidates {
        match auto_register(cloud, geom, init, cfg) {
            Ok(r) => ranked.push((id.clone(), r)),
            Err(PerceptionError::DegenerateCloud { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    ranked.sort_by(|a, b| {
        b.1.inlier_fraction
            .total_cmp(&a.1.inlier_fraction)
            .then(a.1.rms_residual.total_cmp(&b.1.rms_residual))
    });
    Ok(ranked)
}
