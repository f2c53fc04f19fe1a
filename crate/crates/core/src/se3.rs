//! Rigid transforms: unit quaternion rotation plus translation in meters.

use nalgebra::{Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// An SE(3) element. Composition follows homogeneous-transform semantics:
/// `a.compose(&b)` maps points from b's frame through a.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds from raw quaternion components, renormalizing.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)), translation }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn rotation_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        Self { rotation: UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle), translation: Vector3::zeros() }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::rotation_axis_angle(Vector3::x(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::rotation_axis_angle(Vector3::z(), angle)
    }

    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::from_euler_angles(roll, pitch, yaw), translation }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = self.rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        let r = Rotation3::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned());
        Pose { rotation: UnitQuaternion::from_rotation_matrix(&r), translation: m.fixed_view::<3, 1>(0, 3).into_owned() }
    }

    /// `[x, y, z, qw, qx, qy, qz]`, the layout used for pose channels.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [t.x, t.y, t.z, q.w, q.i, q.j, q.k]
    }

    pub fn from_slice(v: &[f64]) -> Option<Pose> {
        if v.len() != 7 {
            return None;
        }
        Some(Pose::from_wxyz(v[3], v[4], v[5], v[6], Vector3::new(v[0], v[1], v[2])))
    }

    /// Angle of the relative rotation between two poses, in [0, π].
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Rotation about base z, extracted from the rotated x axis.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }
}

/// Serializable pose record: translation and wxyz quaternion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
}

impl From<PoseRecord> for Pose {
    fn from(r: PoseRecord) -> Pose {
        let t = Vector3::from(r.translation);
        match (r.rotation, r.rpy) {
            (Some([w, x, y, z]), _) => Pose::from_wxyz(w, x, y, z, t),
            (None, Some([roll, pitch, yaw])) => Pose::from_rpy(roll, pitch, yaw, t),
            (None, None) => Pose::new(UnitQuaternion::identity(), t),
        }
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> PoseRecord {
        let a = p.to_array();
        PoseRecord { translation: [a[0], a[1], a[2]], rotation: Some([a[3], a[4], a[5], a[6]]), rpy: None }
    }
}

/// Shortest-path spherical interpolation with an nlerp fallback near zero angle.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        return UnitQuaternion::new_normalize(qa.lerp(&qb, t));
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    UnitQuaternion::new_normalize(qa * wa + qb * wb)
}

/// `n_steps` poses from start to goal; element `i` sits at fraction `(i+1)/n`,
/// so the last element is exactly the goal.
pub fn interpolate_linear(start: &Pose, goal: &Pose, n_steps: usize) -> Vec<Pose> {
    assert!(n_steps >= 1, "interpolation needs at least one step");
    (1..=n_steps)
        .map(|i| {
            if i == n_steps {
                return *goal;
            }
            let t = i as f64 / n_steps as f64;
            Pose {
                rotation: slerp(&start.rotation, &goal.rotation, t),
                translation: start.translation.lerp(&goal.translation, t),
            }
        })
        .collect()
}

/// Camera pose in the robot base frame from a tag seen by the camera whose
/// pose in the base frame is known: `base_T_cam = base_T_tag · (cam_T_tag)⁻¹`.
pub fn calibrate_camera(base_t_tag: &Pose, cam_t_tag: &Pose) -> Pose {
    base_t_tag.compose(&cam_t_tag.inverse())
}
