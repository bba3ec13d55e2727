//! Rigid poses with a stable JSON representation.

use std::borrow::Cow;
use std::fmt;
use std::ops::{Deref, Mul};

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use schemars::{JsonSchema, Schema, SchemaGenerator};
use serde::{Deserialize, Serialize};

/// Quaternions read from JSON may be off unit length by at most this much;
/// they are renormalised on ingest.
const INGEST_NORM_TOLERANCE: f64 = 1e-3;

/// Position (meters) plus unit-quaternion orientation.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose(Isometry3<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Isometry3::identity())
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose(Isometry3::from_parts(Translation3::from(position), orientation))
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Rotation given as a scaled axis (axis * angle, radians).
    pub fn from_parts_scaled_axis(position: Vector3<f64>, scaled_axis: Vector3<f64>) -> Self {
        Self::new(position, UnitQuaternion::from_scaled_axis(scaled_axis))
    }

    pub fn iso(&self) -> &Isometry3<f64> {
        &self.0
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.translation.vector
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        self.0.rotation
    }

    pub fn inverse(&self) -> Pose {
        Pose(self.0.inverse())
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.0.transform_point(p)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let dp = (self.position() - other.position()).norm();
        let da = self.orientation().angle_to(&other.orientation());
        (dp, da)
    }

    /// Rotates `self` about a vertical (world z) axis through its own origin,
    /// then translates it.
    pub fn rotated_about_own_z(&self, angle: f64, translation: Vector3<f64>) -> Pose {
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle);
        Pose::new(self.position() + translation, rz * self.orientation())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl From<Isometry3<f64>> for Pose {
    fn from(iso: Isometry3<f64>) -> Self {
        Pose(iso)
    }
}

impl From<Pose> for Isometry3<f64> {
    fn from(p: Pose) -> Self {
        p.0
    }
}

impl Deref for Pose {
    type Target = Isometry3<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.position();
        let q = self.orientation();
        write!(
            f,
            "Pose(p=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
            p.x, p.y, p.z, q.w, q.i, q.j, q.k
        )
    }
}

/// JSON form: `{"position": [x, y, z], "orientation": [w, x, y, z]}`.
#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    /// Meters.
    position: [f64; 3],
    /// Unit quaternion, scalar first.
    #[serde(default = "identity_quat")]
    orientation: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let t = p.position();
        let q = p.orientation();
        PoseRepr {
            position: [t.x, t.y, t.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;
    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        if r.position.iter().chain(r.orientation.iter()).any(|v| !v.is_finite()) {
            return Err("pose contains non-finite values".into());
        }
        let [w, x, y, z] = r.orientation;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if (n - 1.0).abs() > INGEST_NORM_TOLERANCE {
            return Err(format!("orientation quaternion norm {n} is not unit"));
        }
        Ok(Pose::new(
            Vector3::from(r.position),
            UnitQuaternion::from_quaternion(q),
        ))
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr::from(*self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        Pose::try_from(repr).map_err(serde::de::Error::custom)
    }
}

impl JsonSchema for Pose {
    fn schema_name() -> Cow<'static, str> {
        "Pose".into()
    }

    fn json_schema(generator: &mut SchemaGenerator) -> Schema {
        PoseRepr::json_schema(generator)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let p = Pose::from_parts_scaled_axis(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.0, 0.4, 0.1));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        let (dp, da) = p.distance_to(&back);
        assert!(dp < 1e-15 && da < 1e-12);
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let r = serde_json::from_str::<Pose>(r#"{"position":[0,0,0],"orientation":[2,0,0,0]}"#);
        assert!(r.is_err());
    }

    #[test]
    fn near_unit_quaternion_is_renormalised() {
        let p: Pose =
            serde_json::from_str(r#"{"position":[0,0,0],"orientation":[0.7071,0,0,0.7071]}"#).unwrap();
        let q = p.orientation();
        assert!((q.norm() - 1.0).abs() < 1e-12);
    }
}
