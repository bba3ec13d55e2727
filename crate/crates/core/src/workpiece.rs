//! Workpiece surface, coating layer, Preston-law sanding and sandpaper wear.
//!
//! Surfaces are parameterised by arc-length coordinates `(u, v)` in meters,
//! centred on the object frame origin. Coating thickness and substrate damage
//! are stored per cell in micrometers.

use nalgebra::{Point3, Vector3};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::SurfaceTarget;
use crate::pose::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum MaterialError {
    #[error("time step must be positive, got {0}")]
    InvalidDt(f64),
    #[error("contact center ({0:.4}, {1:.4}) m lies outside the surface")]
    ContactOffSurface(f64, f64),
    #[error("invalid tool contact: {0}")]
    InvalidContact(String),
    #[error("invalid surface: {0}")]
    InvalidSurface(String),
}

/// Material, tool and wear constants. All fields can be overridden per scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    pub disc_radius_mm: f64,
    /// Orbital speed of the random-orbit sander, expressed as an equivalent
    /// sliding speed.
    pub orbital_speed_mm_s: f64,
    pub cell_size_mm: f64,
    pub coating_um: f64,
    pub done_threshold_um: f64,
    pub eta_min: f64,
    pub wear_time_s: f64,
    pub gouge_limit_um: f64,
    pub pitch_max_rad: f64,
    /// Leading-edge pressure concentration gain at full pitch.
    pub pitch_kappa: f64,
    /// Preston coefficient in µm per (N/mm² · mm/s · s). Derived from the
    /// reference parameters below when absent.
    pub k_preston: Option<f64>,
    pub reference_force_n: f64,
    pub reference_feed_mm_s: f64,
    /// Number of full-diameter traversals that strip `coating_um` at the
    /// reference force and feed with fresh paper.
    pub reference_traversals: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            disc_radius_mm: 62.5,
            orbital_speed_mm_s: 4000.0,
            cell_size_mm: 2.0,
            coating_um: 100.0,
            done_threshold_um: 5.0,
            eta_min: 0.2,
            wear_time_s: 600.0,
            gouge_limit_um: 20.0,
            pitch_max_rad: 0.15,
            pitch_kappa: 2.0,
            k_preston: None,
            reference_force_n: 15.0,
            reference_feed_mm_s: 50.0,
            reference_traversals: 2.0,
        }
    }
}

impl MaterialParams {
    pub fn disc_radius_m(&self) -> f64 {
        self.disc_radius_mm * 1e-3
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_mm * 1e-3
    }

    /// Depth removed at a point crossed by the full disc diameter is
    /// `k · p · v · (2r / feed)`; the default `k` makes `reference_traversals`
    /// such crossings remove the default coating.
    pub fn k_preston(&self) -> f64 {
        self.k_preston.unwrap_or_else(|| {
            let r = self.disc_radius_mm;
            let pressure = self.reference_force_n / (std::f64::consts::PI * r * r);
            let speed = self.reference_feed_mm_s + self.orbital_speed_mm_s;
            let contact_time = 2.0 * r / self.reference_feed_mm_s;
            self.coating_um / (self.reference_traversals * pressure * speed * contact_time)
        })
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let positive = [
            ("disc_radius_mm", self.disc_radius_mm),
            ("cell_size_mm", self.cell_size_mm),
            ("wear_time_s", self.wear_time_s),
            ("pitch_max_rad", self.pitch_max_rad),
            ("reference_force_n", self.reference_force_n),
            ("reference_feed_mm_s", self.reference_feed_mm_s),
            ("reference_traversals", self.reference_traversals),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MaterialError::InvalidSurface(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("orbital_speed_mm_s", self.orbital_speed_mm_s),
            ("coating_um", self.coating_um),
            ("done_threshold_um", self.done_threshold_um),
            ("gouge_limit_um", self.gouge_limit_um),
            ("pitch_kappa", self.pitch_kappa),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MaterialError::InvalidSurface(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.eta_min) {
            return Err(MaterialError::InvalidSurface("eta_min must lie in [0, 1]".into()));
        }
        if let Some(k) = self.k_preston {
            if !(k.is_finite() && k >= 0.0) {
                return Err(MaterialError::InvalidSurface("k_preston must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Surface shape in the object frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SurfaceShape {
    /// Plane z = 0, normal +z.
    Flat,
    /// Cylindrical section curved along u with its axis parallel to v.
    /// Positive radius is convex toward +z, negative is concave.
    Cylinder { radius_m: f64 },
}

/// Closest point on a bounded surface patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPoint {
    pub uv: [f64; 2],
    pub point: Point3<f64>,
    pub normal: Vector3<f64>,
    /// True when the unconstrained projection fell outside the patch.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SurfaceGeometry {
    pub shape: SurfaceShape,
    /// Extent along u, meters.
    pub width_m: f64,
    /// Extent along v, meters.
    pub height_m: f64,
}

impl SurfaceGeometry {
    pub fn validate(&self) -> Result<(), MaterialError> {
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return Err(MaterialError::InvalidSurface("extent must be positive".into()));
        }
        if let SurfaceShape::Cylinder { radius_m } = self.shape {
            if !radius_m.is_finite() || radius_m.abs() < 1e-3 {
                return Err(MaterialError::InvalidSurface("cylinder radius too small".into()));
            }
            if self.width_m / radius_m.abs() > 1.8 * std::f64::consts::PI {
                return Err(MaterialError::InvalidSurface("arc spans more than 324 degrees".into()));
            }
        }
        Ok(())
    }

    pub fn half_extent(&self) -> [f64; 2] {
        [0.5 * self.width_m, 0.5 * self.height_m]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [hu, hv] = self.half_extent();
        u.abs() <= hu + 1e-12 && v.abs() <= hv + 1e-12
    }

    pub fn point(&self, u: f64, v: f64) -> Point3<f64> {
        match self.shape {
            SurfaceShape::Flat => Point3::new(u, v, 0.0),
            SurfaceShape::Cylinder { radius_m: r } => {
                let th = u / r;
                Point3::new(r * th.sin(), v, r * (th.cos() - 1.0))
            }
        }
    }

    pub fn normal(&self, u: f64, _v: f64) -> Vector3<f64> {
        match self.shape {
            SurfaceShape::Flat => Vector3::z(),
            SurfaceShape::Cylinder { radius_m: r } => {
                let th = u / r;
                Vector3::new(th.sin(), 0.0, th.cos())
            }
        }
    }

    /// Unit 3-D direction of a `(du, dv)` step at `(u, v)`.
    pub fn tangent(&self, u: f64, _v: f64, duv: [f64; 2]) -> Vector3<f64> {
        let du = match self.shape {
            SurfaceShape::Flat => Vector3::x(),
            SurfaceShape::Cylinder { radius_m: r } => {
                let th = u / r;
                Vector3::new(th.cos(), 0.0, -th.sin())
            }
        };
        let t = du * duv[0] + Vector3::y() * duv[1];
        let n = t.norm();
        if n > 0.0 {
            t / n
        } else {
            du
        }
    }

    /// Unclamped surface coordinates of the foot point of `p`.
    fn project(&self, p: &Point3<f64>) -> [f64; 2] {
        match self.shape {
            SurfaceShape::Flat => [p.x, p.y],
            SurfaceShape::Cylinder { radius_m: r } => {
                let (s, c) = (p.x / r, (p.z + r) / r);
                let th = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
                [r * th, p.y]
            }
        }
    }

    pub fn closest_point(&self, p: &Point3<f64>) -> ClosestPoint {
        let [u, v] = self.project(p);
        let [hu, hv] = self.half_extent();
        let (uc, vc) = (u.clamp(-hu, hu), v.clamp(-hv, hv));
        ClosestPoint {
            uv: [uc, vc],
            point: self.point(uc, vc),
            normal: self.normal(uc, vc),
            clamped: uc != u || vc != v,
        }
    }

    /// First intersection of a ray with the bounded patch (object frame).
    /// Returns the ray parameter and surface coordinates.
    pub fn intersect_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f64; 2])> {
        const EPS: f64 = 1e-12;
        match self.shape {
            SurfaceShape::Flat => {
                if dir.z.abs() < EPS {
                    return None;
                }
                let t = -origin.z / dir.z;
                let hit = origin + dir * t;
                (t > EPS && self.contains(hit.x, hit.y)).then_some((t, [hit.x, hit.y]))
            }
            SurfaceShape::Cylinder { radius_m: r } => {
                let oz = origin.z + r;
                let a = dir.x * dir.x + dir.z * dir.z;
                if a < EPS {
                    return None;
                }
                let b = 2.0 * (origin.x * dir.x + oz * dir.z);
                let c = origin.x * origin.x + oz * oz - r * r;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .filter(|&t| t > EPS)
                    .find_map(|t| {
                        let hit = origin + dir * t;
                        let [u, v] = self.project(&hit);
                        self.contains(u, v).then_some((t, [u, v]))
                    })
            }
        }
    }
}

/// Axis-aligned rectangle in surface coordinates, millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UvRect {
    pub u_min_mm: f64,
    pub u_max_mm: f64,
    pub v_min_mm: f64,
    pub v_max_mm: f64,
}

impl UvRect {
    pub fn contains(&self, uv: [f64; 2]) -> bool {
        let (u, v) = (uv[0] * 1e3, uv[1] * 1e3);
        u >= self.u_min_mm && u <= self.u_max_mm && v >= self.v_min_mm && v <= self.v_max_mm
    }
}

/// Discretised workpiece surface with its coating state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub id: String,
    pub geometry: SurfaceGeometry,
    pub cell_size_m: f64,
    pub nu: usize,
    pub nv: usize,
    /// Row-major (`j * nu + i`), micrometers.
    pub coating_um: Vec<f64>,
    /// Depth sanded into the substrate after the coating was gone, micrometers.
    pub substrate_removed_um: Vec<f64>,
    pub target: Vec<bool>,
    pub object_pose: Pose,
    /// Running total of coating removed by [`removal_step`], mm³.
    pub removed_volume_mm3: f64,
}

impl SurfaceGrid {
    /// Uniform coating, every cell targeted. The extent is snapped to whole cells.
    pub fn new(
        id: impl Into<String>,
        geometry: SurfaceGeometry,
        cell_size_m: f64,
        coating_um: f64,
        object_pose: Pose,
    ) -> Result<Self, MaterialError> {
        geometry.validate()?;
        if !(cell_size_m > 0.0) {
            return Err(MaterialError::InvalidSurface("cell size must be positive".into()));
        }
        if !(coating_um >= 0.0) {
            return Err(MaterialError::InvalidSurface("coating must be non-negative".into()));
        }
        let nu = ((geometry.width_m / cell_size_m).round() as usize).max(1);
        let nv = ((geometry.height_m / cell_size_m).round() as usize).max(1);
        let geometry = SurfaceGeometry {
            width_m: nu as f64 * cell_size_m,
            height_m: nv as f64 * cell_size_m,
            ..geometry
        };
        let n = nu * nv;
        Ok(SurfaceGrid {
            id: id.into(),
            geometry,
            cell_size_m,
            nu,
            nv,
            coating_um: vec![coating_um; n],
            substrate_removed_um: vec![0.0; n],
            target: vec![true; n],
            object_pose,
            removed_volume_mm3: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.nu * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nu + i
    }

    pub fn cell_area_mm2(&self) -> f64 {
        let c = self.cell_size_m * 1e3;
        c * c
    }

    pub fn cell_uv(&self, i: usize, j: usize) -> [f64; 2] {
        let [hu, hv] = self.geometry.half_extent();
        [
            -hu + (i as f64 + 0.5) * self.cell_size_m,
            -hv + (j as f64 + 0.5) * self.cell_size_m,
        ]
    }

    pub fn cell_uv_index(&self, idx: usize) -> [f64; 2] {
        self.cell_uv(idx % self.nu, idx / self.nu)
    }

    pub fn cell_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if !self.geometry.contains(u, v) {
            return None;
        }
        let [hu, hv] = self.geometry.half_extent();
        let i = (((u + hu) / self.cell_size_m) as usize).min(self.nu - 1);
        let j = (((v + hv) / self.cell_size_m) as usize).min(self.nv - 1);
        Some((i, j))
    }

    pub fn set_target_rects(&mut self, rects: &[UvRect]) {
        for idx in 0..self.len() {
            let uv = self.cell_uv_index(idx);
            self.target[idx] = rects.iter().any(|r| r.contains(uv));
        }
    }

    pub fn set_coating_rect(&mut self, rect: &UvRect, coating_um: f64) {
        for idx in 0..self.len() {
            if rect.contains(self.cell_uv_index(idx)) {
                self.coating_um[idx] = coating_um;
            }
        }
    }

    pub fn total_coating_volume_mm3(&self) -> f64 {
        self.coating_um.iter().sum::<f64>() * self.cell_area_mm2() * 1e-3
    }

    pub fn world_point(&self, uv: [f64; 2]) -> Point3<f64> {
        self.object_pose.transform_point(&self.geometry.point(uv[0], uv[1]))
    }

    pub fn world_normal(&self, uv: [f64; 2]) -> Vector3<f64> {
        self.object_pose.transform_vector(&self.geometry.normal(uv[0], uv[1]))
    }

    /// World contact target at `uv`, optionally with a path direction in `(u, v)`.
    pub fn surface_target(&self, uv: [f64; 2], heading: Option<[f64; 2]>) -> SurfaceTarget {
        SurfaceTarget {
            point: self.world_point(uv),
            normal: self.world_normal(uv),
            tangent: heading.map(|h| {
                self.object_pose.transform_vector(&self.geometry.tangent(uv[0], uv[1], h))
            }),
        }
    }

    /// Surface coordinates of the point on the true surface nearest `world`.
    pub fn locate(&self, world: &Point3<f64>) -> ClosestPoint {
        let local = self.object_pose.inverse().transform_point(world);
        self.geometry.closest_point(&local)
    }
}

/// Usage clock and abrasive efficiency of the current sanding disc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SandpaperState {
    pub usage_seconds: f64,
    pub efficiency: f64,
}

impl SandpaperState {
    pub fn fresh() -> Self {
        SandpaperState { usage_seconds: 0.0, efficiency: 1.0 }
    }

    pub fn with_usage(usage_seconds: f64, params: &MaterialParams) -> Self {
        SandpaperState { usage_seconds, efficiency: efficiency_for(usage_seconds, params) }
    }
}

impl Default for SandpaperState {
    fn default() -> Self {
        SandpaperState::fresh()
    }
}

/// `max(eta_min, 1 - usage / wear_time)`.
pub fn efficiency_for(usage_seconds: f64, params: &MaterialParams) -> f64 {
    (1.0 - usage_seconds / params.wear_time_s).max(params.eta_min)
}

pub fn wear_update(
    paper: &SandpaperState,
    dt: f64,
    engaged: bool,
    params: &MaterialParams,
) -> Result<SandpaperState, MaterialError> {
    if !(dt > 0.0) {
        return Err(MaterialError::InvalidDt(dt));
    }
    if !engaged {
        return Ok(*paper);
    }
    Ok(SandpaperState::with_usage(paper.usage_seconds + dt, params))
}

pub fn change_sandpaper(_paper: &SandpaperState) -> SandpaperState {
    SandpaperState::fresh()
}

/// Sander state against the surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolContact {
    /// Disc center in surface coordinates, meters.
    pub center_uv: [f64; 2],
    /// Unit direction of travel in surface coordinates.
    pub heading_uv: [f64; 2],
    pub normal_force_n: f64,
    pub tangential_speed_mm_s: f64,
    /// Tilt about the path-transverse axis; positive loads the leading edge.
    pub pitch_rad: f64,
    pub engaged: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RemovalReport {
    pub removed_mm3: f64,
    pub cells: usize,
    pub peak_depth_um: f64,
}

/// Cells under the disc with their pressure weights.
fn footprint(grid: &SurfaceGrid, contact: &ToolContact, params: &MaterialParams) -> Vec<(usize, f64)> {
    let r = params.disc_radius_m();
    let [cu, cv] = contact.center_uv;
    let [hu, hv] = grid.geometry.half_extent();
    let cs = grid.cell_size_m;
    let span = |c: f64, h: f64, n: usize| {
        let lo = (((c - r + h) / cs) - 0.5).floor().max(0.0) as usize;
        let hi = ((((c + r + h) / cs) - 0.5).ceil().max(0.0) as usize).min(n - 1);
        lo..=hi
    };
    let concentration = 1.0 + params.pitch_kappa * contact.pitch_rad.abs() / params.pitch_max_rad;
    let lead = contact.pitch_rad.signum();
    let [hx, hy] = contact.heading_uv;
    let mut cells = Vec::new();
    for j in span(cv, hv, grid.nv) {
        for i in span(cu, hu, grid.nu) {
            let [u, v] = grid.cell_uv(i, j);
            let (du, dv) = (u - cu, v - cv);
            if du * du + dv * dv > r * r {
                continue;
            }
            let along = du * hx + dv * hy;
            let w = if contact.pitch_rad != 0.0 && lead * along > 0.5 * r {
                concentration
            } else {
                1.0
            };
            cells.push((grid.index(i, j), w));
        }
    }
    cells
}

/// Per-cell contact pressure (N/mm²) under the disc. Force is spread over the
/// on-surface footprint, with the pitched leading crescent carrying more.
pub fn pressure_field(grid: &SurfaceGrid, contact: &ToolContact, params: &MaterialParams) -> Vec<(usize, f64)> {
    let cells = footprint(grid, contact, params);
    let area = grid.cell_area_mm2();
    let total: f64 = cells.iter().map(|(_, w)| w * area).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    cells
        .into_iter()
        .map(|(idx, w)| (idx, contact.normal_force_n * w / total))
        .collect()
}

/// One Preston-law sanding step: `dh = k · eta · p · (v_t + v_orbital) · dt`.
pub fn removal_step(
    grid: &mut SurfaceGrid,
    contact: &ToolContact,
    paper: &SandpaperState,
    dt: f64,
    params: &MaterialParams,
) -> Result<RemovalReport, MaterialError> {
    if !(dt > 0.0) {
        return Err(MaterialError::InvalidDt(dt));
    }
    if !contact.engaged {
        return Ok(RemovalReport::default());
    }
    let [u, v] = contact.center_uv;
    if !grid.geometry.contains(u, v) {
        return Err(MaterialError::ContactOffSurface(u, v));
    }
    if !(contact.normal_force_n >= 0.0) {
        return Err(MaterialError::InvalidContact("normal force must be non-negative".into()));
    }
    if !(contact.pitch_rad.abs() <= params.pitch_max_rad + 1e-12) {
        return Err(MaterialError::InvalidContact(format!(
            "pitch {} exceeds {}",
            contact.pitch_rad, params.pitch_max_rad
        )));
    }
    let speed = contact.tangential_speed_mm_s.abs() + params.orbital_speed_mm_s;
    let gain = params.k_preston() * paper.efficiency * speed * dt;
    let area = grid.cell_area_mm2();
    let mut report = RemovalReport::default();
    for (idx, pressure) in pressure_field(grid, contact, params) {
        let depth = gain * pressure;
        let coat = grid.coating_um[idx];
        let from_coating = depth.min(coat);
        grid.coating_um[idx] = coat - from_coating;
        grid.substrate_removed_um[idx] += depth - from_coating;
        report.removed_mm3 += from_coating * area * 1e-3;
        report.cells += 1;
        report.peak_depth_um = report.peak_depth_um.max(depth);
    }
    grid.removed_volume_mm3 += report.removed_mm3;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CoverageMetrics {
    pub removed_fraction: f64,
    pub oversand_area_m2: f64,
    pub undersand_area_m2: f64,
    pub removed_volume_mm3: f64,
    pub target_cells: usize,
}

pub fn coverage_metrics(grid: &SurfaceGrid, params: &MaterialParams) -> CoverageMetrics {
    coverage_metrics_masked(grid, params, &grid.target)
}

/// Metrics with `mask` standing in for the grid's own target mask.
#[allow(clippy::needless_range_loop)]
pub fn coverage_metrics_masked(grid: &SurfaceGrid, params: &MaterialParams, mask: &[bool]) -> CoverageMetrics {
    let cell_m2 = grid.cell_size_m * grid.cell_size_m;
    let mut targets = 0usize;
    let mut done = 0usize;
    let mut oversand = 0usize;
    for idx in 0..grid.len() {
        let coat = grid.coating_um[idx];
        if mask[idx] {
            targets += 1;
            if coat < params.done_threshold_um {
                done += 1;
            }
        }
        if coat == 0.0 && grid.substrate_removed_um[idx] > params.gouge_limit_um {
            oversand += 1;
        }
    }
    CoverageMetrics {
        removed_fraction: if targets == 0 { 1.0 } else { done as f64 / targets as f64 },
        oversand_area_m2: oversand as f64 * cell_m2,
        undersand_area_m2: (targets - done) as f64 * cell_m2,
        removed_volume_mm3: grid.removed_volume_mm3,
        target_cells: targets,
    }
}
