use nalgebra::{Matrix3, Rotation3, Vector3};

use super::landmarks::{LandmarkFrame, LandmarkSequence, Point3, STABLE_INDICES};
use super::GeometryError;

/// Head orientation as yaw (about y), pitch (about x) and roll (about z) in
/// degrees, composed as `R = Ry(yaw) * Rx(pitch) * Rz(roll)`, plus a centroid
/// offset in face-width units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadPose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub translation: Vector3<f64>,
}

impl HeadPose {
    pub fn new(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self { yaw, pitch, roll, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_angles(yaw: f64, pitch: f64, roll: f64) -> Result<Self, GeometryError> {
        Self::new(yaw, pitch, roll, Vector3::zeros())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, a) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if !(a.is_finite() && a > -180.0 && a <= 180.0) {
                return Err(GeometryError::Validation(format!("{name} {a} outside (-180, 180]")));
            }
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Validation("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_matrix(self.yaw, self.pitch, self.roll)
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

pub fn euler_to_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw.to_radians());
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch.to_radians());
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), roll.to_radians());
    (ry * rx * rz).into_inner()
}

/// Inverse of [`euler_to_matrix`]; returns `(yaw, pitch, roll)` in degrees.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let sp = (-r[(1, 2)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if pitch.cos() > 1e-9 {
        let yaw = r[(0, 2)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(1, 1)]);
        (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
    } else {
        // gimbal lock: fold roll into yaw
        let yaw = (-r[(2, 0)]).atan2(r[(0, 0)]);
        (yaw.to_degrees(), pitch.to_degrees(), 0.0)
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let mut w = a % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

/// Geodesic angle in degrees between two rotation matrices.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a * b.transpose();
    let cos = (d.trace() - 1.0) / 2.0;
    let sin = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Rotation that best maps the template's stable subset onto the frame's
/// (orthogonal Procrustes), with the centroid offset in template face widths.
pub fn decompose_head_pose(frame: &LandmarkFrame, template: &LandmarkFrame) -> Result<HeadPose, GeometryError> {
    let fc = frame.stable_centroid();
    let tc = template.stable_centroid();
    let mut cov = Matrix3::zeros();
    for &i in &STABLE_INDICES {
        cov += (frame.point(i) - fc) * (template.point(i) - tc).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::Pose("SVD did not converge".into())),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] / sv[0] < 1e-10 {
        return Err(GeometryError::Pose("stable landmarks are collinear".into()));
    }
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let (yaw, pitch, roll) = matrix_to_euler(&r);
    let width = template.face_width();
    if !(width > 0.0) {
        return Err(GeometryError::Pose("template face width is zero".into()));
    }
    Ok(HeadPose {
        yaw: wrap_degrees(yaw),
        pitch: wrap_degrees(pitch),
        roll: wrap_degrees(roll),
        translation: (fc - tc) / width,
    })
}

/// Head pose of every frame relative to `template`.
pub fn decompose_sequence(seq: &LandmarkSequence, template: &LandmarkFrame) -> Result<Vec<HeadPose>, GeometryError> {
    seq.frames().iter().map(|f| decompose_head_pose(f, template)).collect()
}

/// Rigidly moves one frame: rotation about its stable-subset centroid, then
/// translation by `pose.translation * face_width`.
pub fn apply_pose_to_frame(frame: &LandmarkFrame, pose: &HeadPose, face_width: f64) -> Result<LandmarkFrame, GeometryError> {
    pose.validate()?;
    let r = pose.rotation();
    let c = frame.stable_centroid();
    let shift: Point3 = pose.translation * face_width;
    frame.map(|_, p| r * (p - c) + c + shift)
}

/// Applies one pose to every frame, or one pose per frame. The face width is
/// taken from the first frame.
pub fn apply_head_pose(seq: &LandmarkSequence, poses: &[HeadPose]) -> Result<LandmarkSequence, GeometryError> {
    if poses.len() != 1 && poses.len() != seq.len() {
        return Err(GeometryError::Validation(format!(
            "got {} poses for {} frames",
            poses.len(),
            seq.len()
        )));
    }
    for p in poses {
        p.validate()?;
    }
    let width = seq.frame(0).face_width();
    seq.map_frames(|t, f| {
        let pose = if poses.len() == 1 { &poses[0] } else { &poses[t] };
        apply_pose_to_frame(f, pose, width)
    })
}
