//! Sanding task programs: stored structured rasters, marker-bounded rasters,
//! and per-segment reachability with completion memory.

use nalgebra::{Point3, Vector3};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::kinematics::{tool_pose_for_surface, KinematicsError, Reachability, ReachabilityStatus};
use crate::perception::{CameraIntrinsics, RegistrationResult};
use crate::pose::Pose;
use crate::workpiece::{SurfaceGeometry, SurfaceGrid, UvRect};

/// Largest spacing between consecutive waypoints along a lane, meters.
pub const MAX_WAYPOINT_SPACING_M: f64 = 0.02;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown geometry '{0}'")]
    UnknownGeometry(String),
    #[error("marker {0} does not hit the surface")]
    MarkerOffSurface(usize),
    #[error("marker quadrilateral is degenerate")]
    DegenerateQuad,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("object pose has not been confirmed")]
    UnconfirmedRegistration,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Completed,
    Reachable,
    Unreachable,
}

impl SegmentStatus {
    pub fn color(self) -> &'static str {
        match self {
            SegmentStatus::Completed => "gray",
            SegmentStatus::Reachable => "blue",
            SegmentStatus::Unreachable => "red",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PassOrientation {
    /// Lanes run along u.
    Horizontal,
    /// Lanes run along v.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct NominalParameters {
    pub passes: u32,
    pub orientation: PassOrientation,
    pub force_n: f64,
    pub feed_mm_s: f64,
    pub pitch_rad: f64,
}

impl Default for NominalParameters {
    fn default() -> Self {
        NominalParameters {
            passes: 2,
            orientation: PassOrientation::Horizontal,
            force_n: 15.0,
            feed_mm_s: 50.0,
            pitch_rad: 0.0,
        }
    }
}

impl NominalParameters {
    pub const FORCE_RANGE: [f64; 2] = [1.0, 40.0];
    pub const FEED_RANGE: [f64; 2] = [10.0, 200.0];
    pub const PASSES_RANGE: [u32; 2] = [1, 10];

    pub fn validate(&self, pitch_max: f64) -> Result<(), TaskError> {
        let in_range = |v: f64, [lo, hi]: [f64; 2]| v.is_finite() && v >= lo && v <= hi;
        if !in_range(self.force_n, Self::FORCE_RANGE) {
            return Err(TaskError::InvalidParameters(format!("force {} N outside [1, 40]", self.force_n)));
        }
        if !in_range(self.feed_mm_s, Self::FEED_RANGE) {
            return Err(TaskError::InvalidParameters(format!("feed {} mm/s outside [10, 200]", self.feed_mm_s)));
        }
        if !(self.pitch_rad.is_finite() && self.pitch_rad.abs() <= pitch_max) {
            return Err(TaskError::InvalidParameters(format!("pitch {} rad exceeds {pitch_max}", self.pitch_rad)));
        }
        if !(Self::PASSES_RANGE[0]..=Self::PASSES_RANGE[1]).contains(&self.passes) {
            return Err(TaskError::InvalidParameters(format!("passes {} outside [1, 10]", self.passes)));
        }
        Ok(())
    }

    /// Nearest valid parameter set. Non-finite values fall back to defaults.
    pub fn clamped(&self, pitch_max: f64) -> NominalParameters {
        let d = NominalParameters::default();
        let fix = |v: f64, fallback: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { fallback };
        NominalParameters {
            passes: self.passes.clamp(Self::PASSES_RANGE[0], Self::PASSES_RANGE[1]),
            orientation: self.orientation,
            force_n: fix(self.force_n, d.force_n, Self::FORCE_RANGE[0], Self::FORCE_RANGE[1]),
            feed_mm_s: fix(self.feed_mm_s, d.feed_mm_s, Self::FEED_RANGE[0], Self::FEED_RANGE[1]),
            pitch_rad: fix(self.pitch_rad, d.pitch_rad, -pitch_max, pitch_max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub uv: [f64; 2],
    /// Tool pose in the object frame.
    pub local: Pose,
    /// Tool pose in the robot base frame under the program's object pose.
    pub world: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    pub id: usize,
    pub pass: u32,
    pub lane: usize,
    pub waypoints: Vec<Waypoint>,
    pub nominal: NominalParameters,
    pub status: SegmentStatus,
}

impl PathSegment {
    /// Surface arc length, meters.
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| uv_dist(w[0].uv, w[1].uv)).sum()
    }

    /// Surface coordinates and unit heading at arc length `s` (clamped).
    pub fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let mut rest = s.max(0.0);
        let last = self.waypoints.len() - 2;
        for (k, w) in self.waypoints.windows(2).enumerate() {
            let len = uv_dist(w[0].uv, w[1].uv);
            if rest <= len || k == last {
                let f = if len > 0.0 { (rest / len).min(1.0) } else { 0.0 };
                let [a, b] = [w[0].uv, w[1].uv];
                return ([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], self.heading_between(a, b));
            }
            rest -= len;
        }
        unreachable!("segments have at least two waypoints")
    }

    fn heading_between(&self, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let d = uv_dist(a, b);
        if d > 0.0 {
            [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
        } else {
            // Zero-length lanes keep their nominal direction.
            let w = &self.waypoints;
            let x = w[0].local.rotation * Vector3::x();
            let n = (x.x * x.x + x.y * x.y).sqrt();
            if n > 0.0 { [x.x / n, x.y / n] } else { [1.0, 0.0] }
        }
    }
}

fn uv_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ProgramSource {
    StructuredModel,
    UnstructuredSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProgram {
    pub geometry_id: String,
    pub source: ProgramSource,
    pub object_pose: Pose,
    /// True once the object pose comes from a confirmed registration or from
    /// markers projected on the live surface.
    pub pose_confirmed: bool,
    pub segments: Vec<PathSegment>,
}

impl TaskProgram {
    pub fn statuses(&self) -> Vec<SegmentStatus> {
        self.segments.iter().map(|s| s.status).collect()
    }

    pub fn completed_ids(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.status == SegmentStatus::Completed).map(|s| s.id).collect()
    }

    pub fn count(&self, status: SegmentStatus) -> usize {
        self.segments.iter().filter(|s| s.status == status).count()
    }

    fn set_object_pose(&mut self, pose: Pose) {
        self.object_pose = pose;
        for seg in &mut self.segments {
            for w in &mut seg.waypoints {
                w.world = pose.compose(&w.local);
            }
        }
    }
}

/// Quadrilateral in surface coordinates, meters, corners in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SurfaceQuad(pub [[f64; 2]; 4]);

impl SurfaceQuad {
    pub fn from_rect(rect: &UvRect) -> SurfaceQuad {
        let (u0, u1, v0, v1) = (rect.u_min_mm * 1e-3, rect.u_max_mm * 1e-3, rect.v_min_mm * 1e-3, rect.v_max_mm * 1e-3);
        SurfaceQuad([[u0, v0], [u1, v0], [u1, v1], [u0, v1]])
    }

    pub fn area(&self) -> f64 {
        let c = &self.0;
        0.5 * (0..4)
            .map(|i| {
                let (a, b) = (c[i], c[(i + 1) % 4]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            .abs()
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let c = &self.0;
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 3) % 4]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn is_simple(&self) -> bool {
        // The two pairs of opposite edges must not cross.
        let c = &self.0;
        !(segments_cross(c[0], c[1], c[2], c[3]) || segments_cross(c[1], c[2], c[3], c[0]))
    }

    pub fn validate(&self, cell_size_m: f64) -> Result<(), TaskError> {
        let finite = self.0.iter().flatten().all(|v| v.is_finite());
        if !finite || !self.is_simple() || self.area() <= 4.0 * cell_size_m * cell_size_m {
            return Err(TaskError::DegenerateQuad);
        }
        Ok(())
    }
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (d1, d2) = (orient(a, b, c), orient(a, b, d));
    let (d3, d4) = (orient(c, d, a), orient(c, d, b));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Four marker positions on the operator's camera view, pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MarkerSet(pub [[f64; 2]; 4]);

/// Casts each marker pixel through the camera onto the surface.
pub fn project_markers(
    markers: &MarkerSet,
    camera_pose: &Pose,
    camera: &CameraIntrinsics,
    grid: &SurfaceGrid,
) -> Result<SurfaceQuad, TaskError> {
    let cam_obj = grid.object_pose.inverse().compose(camera_pose);
    let origin = Point3::from(cam_obj.position());
    let mut corners = [[0.0; 2]; 4];
    for (i, [px, py]) in markers.0.iter().copied().enumerate() {
        let dir = cam_obj.transform_vector(&camera.ray(px, py));
        let (_, uv) = grid
            .geometry
            .intersect_ray(&origin, &dir)
            .ok_or(TaskError::MarkerOffSurface(i))?;
        corners[i] = uv;
    }
    let quad = SurfaceQuad(corners);
    quad.validate(grid.cell_size_m)?;
    Ok(quad)
}

/// Clips a polygon to `lo <= p[axis] <= hi`.
fn clip_band(poly: &[[f64; 2]], axis: usize, lo: f64, hi: f64) -> Vec<[f64; 2]> {
    let clip = |poly: Vec<[f64; 2]>, keep: &dyn Fn([f64; 2]) -> f64| {
        let mut out = Vec::new();
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let (fa, fb) = (keep(a), keep(b));
            if fa >= 0.0 {
                out.push(a);
            }
            if (fa >= 0.0) != (fb >= 0.0) {
                let t = fa / (fa - fb);
                out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
        out
    };
    let below = clip(poly.to_vec(), &|p| p[axis] - lo);
    clip(below, &|p| hi - p[axis])
}

/// Lane center lines `(cross position, along_min, along_max)` covering the quad.
fn raster_lanes(quad: &SurfaceQuad, orientation: PassOrientation, stepover: f64) -> Vec<(f64, f64, f64)> {
    // Horizontal lanes run along u, so they are stacked across v.
    let (along, cross) = match orientation {
        PassOrientation::Horizontal => (0, 1),
        PassOrientation::Vertical => (1, 0),
    };
    let c = &quad.0;
    let lo = c.iter().map(|p| p[cross]).fold(f64::INFINITY, f64::min);
    let hi = c.iter().map(|p| p[cross]).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let n = (span / stepover).ceil() as usize + 1;
    let spacing = span / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let at = if k == n - 1 { hi } else { lo + k as f64 * spacing };
            // Every quad point whose nearest lane is this one lies in this band.
            let band = clip_band(c, cross, at - 0.5 * spacing, at + 0.5 * spacing);
            let a0 = band.iter().map(|p| p[along]).fold(f64::INFINITY, f64::min);
            let a1 = band.iter().map(|p| p[along]).fold(f64::NEG_INFINITY, f64::max);
            (at, a0, a1)
        })
        .filter(|(_, a0, a1)| a0 <= a1)
        .collect()
}

fn make_waypoints(geometry: &SurfaceGeometry, object_pose: &Pose, from: [f64; 2], to: [f64; 2]) -> Vec<Waypoint> {
    let len = uv_dist(from, to);
    let n = ((len / MAX_WAYPOINT_SPACING_M).ceil() as usize).max(1) + 1;
    let dir = if len > 0.0 { [(to[0] - from[0]) / len, (to[1] - from[1]) / len] } else { [1.0, 0.0] };
    (0..n)
        .map(|k| {
            let f = k as f64 / (n - 1) as f64;
            let uv = [from[0] + f * (to[0] - from[0]), from[1] + f * (to[1] - from[1])];
            let local = tool_pose_for_surface(
                &geometry.point(uv[0], uv[1]),
                &geometry.normal(uv[0], uv[1]),
                Some(&geometry.tangent(uv[0], uv[1], dir)),
            );
            Waypoint { uv, local, world: object_pose.compose(&local) }
        })
        .collect()
}

/// Serpentine raster over `quad`, one segment per lane per pass. Odd passes
/// retrace the previous pass in reverse.
pub fn raster_program(
    quad: &SurfaceQuad,
    params: &NominalParameters,
    geometry: &SurfaceGeometry,
    object_pose: &Pose,
    stepover_m: f64,
) -> Vec<PathSegment> {
    let lanes = raster_lanes(quad, params.orientation, stepover_m);
    let point = |cross: f64, along: f64| match params.orientation {
        PassOrientation::Horizontal => [along, cross],
        PassOrientation::Vertical => [cross, along],
    };
    let forward: Vec<(usize, [f64; 2], [f64; 2])> = lanes
        .iter()
        .enumerate()
        .map(|(k, &(at, a0, a1))| {
            let (s, e) = if k % 2 == 0 { (a0, a1) } else { (a1, a0) };
            (k, point(at, s), point(at, e))
        })
        .collect();
    let mut segments = Vec::new();
    for pass in 0..params.passes {
        let order: Vec<(usize, [f64; 2], [f64; 2])> = if pass % 2 == 0 {
            forward.clone()
        } else {
            forward.iter().rev().map(|&(k, s, e)| (k, e, s)).collect()
        };
        for (lane, from, to) in order {
            segments.push(PathSegment {
                id: segments.len(),
                pass: pass + 1,
                lane,
                waypoints: make_waypoints(geometry, object_pose, from, to),
                nominal: *params,
                status: SegmentStatus::Reachable,
            });
        }
    }
    segments
}

/// Unstructured program from an operator quad. The pose is the live surface
/// the markers were projected on, so it counts as confirmed.
pub fn generate_raster(
    quad: &SurfaceQuad,
    params: &NominalParameters,
    grid: &SurfaceGrid,
    stepover_m: f64,
    pitch_max: f64,
) -> Result<TaskProgram, TaskError> {
    quad.validate(grid.cell_size_m)?;
    params.validate(pitch_max)?;
    if !(stepover_m > 0.0) {
        return Err(TaskError::InvalidParameters("stepover must be positive".into()));
    }
    for c in &quad.0 {
        if !grid.geometry.contains(c[0], c[1]) {
            return Err(TaskError::DegenerateQuad);
        }
    }
    Ok(TaskProgram {
        geometry_id: grid.id.clone(),
        source: ProgramSource::UnstructuredSpec,
        object_pose: grid.object_pose,
        pose_confirmed: true,
        segments: raster_program(quad, params, &grid.geometry, &grid.object_pose, stepover_m),
    })
}

/// Stored object-frame task model for a known geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StructuredModel {
    pub geometry_id: String,
    #[serde(default)]
    pub nominal: NominalParameters,
    /// Area the stored passes cover. Defaults to the bounding box of the
    /// target cells.
    #[serde(default)]
    pub region: Option<UvRect>,
    /// Passes run this far past the region on every side, clipped to the
    /// surface.
    #[serde(default)]
    pub overrun_mm: f64,
}

/// Bounding rectangle of target cell centers, meters.
pub fn target_bounds(grid: &SurfaceGrid) -> Option<SurfaceQuad> {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for idx in (0..grid.len()).filter(|&i| grid.target[i]) {
        let [u, v] = grid.cell_uv_index(idx);
        b = [b[0].min(u), b[1].max(u), b[2].min(v), b[3].max(v)];
    }
    b[0].is_finite().then(|| SurfaceQuad([[b[0], b[2]], [b[1], b[2]], [b[1], b[3]], [b[0], b[3]]]))
}

/// Loads the stored raster for `geometry_id` with an unconfirmed placeholder
/// pose; every segment starts Reachable until checked.
pub fn load_structured_model(
    geometry_id: &str,
    models: &[StructuredModel],
    grid: &SurfaceGrid,
    initial_pose: &Pose,
    stepover_m: f64,
) -> Result<TaskProgram, TaskError> {
    let model = models
        .iter()
        .find(|m| m.geometry_id == geometry_id)
        .ok_or_else(|| TaskError::UnknownGeometry(geometry_id.to_string()))?;
    let base = match &model.region {
        Some(r) => SurfaceQuad::from_rect(r),
        None => target_bounds(grid).ok_or(TaskError::DegenerateQuad)?,
    };
    let [hu, hv] = grid.geometry.half_extent();
    let m = model.overrun_mm.max(0.0) * 1e-3;
    let [[u0, v0], _, [u1, v1], _] = base.0;
    let quad = SurfaceQuad::from_rect(&UvRect {
        u_min_mm: (u0 - m).max(-hu) * 1e3,
        u_max_mm: (u1 + m).min(hu) * 1e3,
        v_min_mm: (v0 - m).max(-hv) * 1e3,
        v_max_mm: (v1 + m).min(hv) * 1e3,
    });
    let segments = raster_program(
        &quad,
        &model.nominal,
        &grid.geometry,
        initial_pose,
        stepover_m,
    );
    Ok(TaskProgram {
        geometry_id: geometry_id.to_string(),
        source: ProgramSource::StructuredModel,
        object_pose: *initial_pose,
        pose_confirmed: false,
        segments,
    })
}

/// Marks each non-Completed segment Reachable iff all its waypoints are.
pub fn segment_reachability(
    program: &TaskProgram,
    reach: &Reachability,
    par: Parallelism,
) -> Result<TaskProgram, TaskError> {
    if !program.pose_confirmed {
        return Err(TaskError::UnconfirmedRegistration);
    }
    let open: Vec<usize> = (0..program.segments.len())
        .filter(|&i| program.segments[i].status != SegmentStatus::Completed)
        .collect();
    let poses: Vec<(usize, Pose)> = open
        .iter()
        .flat_map(|&i| program.segments[i].waypoints.iter().map(move |w| (i, w.world)))
        .collect();
    let statuses = par.map(&poses, |(_, p)| reach.status(p));
    let mut out = program.clone();
    for &i in &open {
        out.segments[i].status = SegmentStatus::Reachable;
    }
    for ((i, _), st) in poses.iter().zip(statuses) {
        if st? == ReachabilityStatus::Unreachable {
            out.segments[*i].status = SegmentStatus::Unreachable;
        }
    }
    Ok(out)
}

/// Moves the program to a newly confirmed object pose. Completed segments
/// stay completed; the rest await a fresh reachability check.
pub fn reposition_object(program: &TaskProgram, registration: &RegistrationResult) -> Result<TaskProgram, TaskError> {
    if !registration.accepted {
        return Err(TaskError::UnconfirmedRegistration);
    }
    let mut out = program.clone();
    out.set_object_pose(registration.object_pose);
    out.pose_confirmed = true;
    for seg in &mut out.segments {
        if seg.status != SegmentStatus::Completed {
            seg.status = SegmentStatus::Reachable;
        }
    }
    Ok(out)
}

/// Reachability preview over a quad: sample points on a regular grid inside
/// it, checked point-wise.
pub fn quad_reachability(
    quad: &SurfaceQuad,
    grid: &SurfaceGrid,
    reach: &Reachability,
    spacing_m: f64,
    par: Parallelism,
) -> Result<Vec<([f64; 2], ReachabilityStatus)>, TaskError> {
    let c = &quad.0;
    let (u0, u1) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    let (v0, v1) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
    let nu = ((u1 - u0) / spacing_m).floor() as usize + 1;
    let nv = ((v1 - v0) / spacing_m).floor() as usize + 1;
    let mut uvs = Vec::new();
    for j in 0..nv {
        for i in 0..nu {
            let uv = [u0 + (i as f64 + 0.5) * (u1 - u0) / nu as f64, v0 + (j as f64 + 0.5) * (v1 - v0) / nv as f64];
            if quad.contains(uv) {
                uvs.push(uv);
            }
        }
    }
    let targets: Vec<_> = uvs.iter().map(|&uv| grid.surface_target(uv, None)).collect();
    let statuses = reach.grid(&targets, &Pose::identity(), par)?;
    Ok(uvs.into_iter().zip(statuses).collect())
}
