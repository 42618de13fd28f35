//! Pinhole camera math.
//!
//! Conventions: camera space is +z forward, +x right, +y down. Poses are
//! stored camera-to-world as a rotation matrix plus the camera center in
//! world units. Depth-map lifting samples integer pixel coordinates, while
//! ray generation (Plücker images) samples pixel centers at `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for the orthonormality checks on stored rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the
    /// given vertical field of view (degrees).
    pub fn from_fov(fov_v_deg: f64, width: u32, height: u32) -> Result<Self> {
        let fy = focal_from_fov(fov_v_deg, height)?;
        Self::new(fy, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCamera(format!("{m}: {self:?}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1x1");
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad("focal lengths must be finite and positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie strictly inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie strictly inside the image");
        }
        let fov = self.fov_v_deg();
        if !(fov.is_finite() && fov > 0.0 && fov < 180.0) {
            return bad("vertical field of view out of range");
        }
        Ok(())
    }

    /// Vertical field of view in degrees, `2 atan(height / (2 fy))`.
    pub fn fov_v_deg(&self) -> f64 {
        (2.0 * (self.height as f64 / (2.0 * self.fy)).atan()).to_degrees()
    }

    /// Replaces the vertical FOV, keeping the `fx / fy` ratio, principal
    /// point and image size.
    pub fn with_fov_v(&self, fov_v_deg: f64) -> Result<Self> {
        let fy = focal_from_fov(fov_v_deg, self.height)?;
        let fx = fy * (self.fx / self.fy);
        Self::new(fx, fy, self.cx, self.cy, self.width, self.height)
    }

    /// Resamples the camera to a different resolution. Focal lengths and the
    /// principal point scale with the per-axis resize ratio.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn focal_from_fov(fov_v_deg: f64, height: u32) -> Result<f64> {
    if !(fov_v_deg.is_finite() && fov_v_deg > 0.0 && fov_v_deg < 180.0) {
        return Err(Error::InvalidCamera(format!(
            "vertical FOV {fov_v_deg} outside (0, 180)"
        )));
    }
    Ok(height as f64 / 2.0 / (fov_v_deg.to_radians() / 2.0).tan())
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3) -> Result<Self> {
        let pose = Self { rotation, center };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidCamera("non-finite camera center".into()));
        }
        check_rotation(&self.rotation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, center: Vec3) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            center,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        quaternion_from_matrix(&self.rotation)
    }

    /// Camera whose +z axis points from `eye` to `target`, with image-down
    /// (+y) as close as possible to `down`.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-15)
            .ok_or_else(|| Error::InvalidCamera("look_at target equals eye".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("look_at down vector parallel to view".into()))?;
        let y = z.cross(&x);
        Self::new(Mat3::from_columns(&[x, y, z]), eye)
    }

    pub fn cam_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.center
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.center))
    }

    /// Viewing direction (+z of the camera) in world space.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Image-up direction (−y of the camera) in world space.
    pub fn up(&self) -> Vec3 {
        -self.rotation.column(1).into_owned()
    }

    pub fn inverse(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.transpose(),
            translation: -self.rotation.tr_mul(&self.center),
        }
    }

    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: self.center,
        }
    }
}

/// A rigid transform `x -> R x + t`, used for relative camera motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.transpose(),
            translation: -self.rotation.tr_mul(&self.translation),
        }
    }

    /// Left-applies the transform to a camera-to-world pose.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * pose.rotation,
            center: self.apply(&pose.center),
        }
    }
}

/// Similarity transform `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimilarityRecord", into = "SimilarityRecord")]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let s = Self {
            scale,
            rotation,
            translation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!(
                "similarity scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("non-finite similarity translation".into()));
        }
        check_rotation(&self.rotation)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Maps a camera-to-world pose: the center moves with the transform and
    /// the orientation is left-multiplied by the rotation.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * pose.rotation,
            center: self.apply(&pose.center),
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimilarityRecord {
    scale: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<SimilarityRecord> for SimilarityTransform {
    type Error = Error;
    fn try_from(r: SimilarityRecord) -> Result<Self> {
        SimilarityTransform::new(
            r.scale,
            Mat3::from_row_slice(&r.rotation),
            Vec3::from(r.translation),
        )
    }
}

impl From<SimilarityTransform> for SimilarityRecord {
    fn from(s: SimilarityTransform) -> Self {
        SimilarityRecord {
            scale: s.scale,
            rotation: mat_to_rows(&s.rotation),
            translation: s.translation.into(),
        }
    }
}

pub(crate) fn mat_to_rows(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCamera("non-finite rotation".into()));
    }
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidCamera(format!(
            "rotation is not orthonormal with det +1 (|RᵀR − I| = {ortho:e}, det = {det})"
        )));
    }
    Ok(())
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub fn quaternion_from_matrix(r: &Mat3) -> UnitQuaternion<f64> {
    // Shepperd's method; numerically stable for all rotations.
    let trace = r.trace();
    let (w, x, y, z);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

/// Rotation about a unit-or-not axis by `angle` radians.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(*axis);
    nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner()
}

/// Geodesic angle of a rotation matrix in `[0, π]`.
///
/// Equal to `arccos((tr R − 1) / 2)`, evaluated through `atan2` of the sine
/// and cosine parts so that it stays accurate near 0 and π.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = axis.norm() / 2.0;
    sin.atan2(cos)
}

/// Geodesic distance between two rotations.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a * b.transpose()))
}

/// Inverse perspective projection of a pixel at a given depth.
pub fn unproject(pixel: (f64, f64), depth: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(unproject_unchecked(pixel.0, pixel.1, depth, k))
}

#[inline]
pub(crate) fn unproject_unchecked(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth)
}

/// Perspective projection; returns the continuous pixel and the depth.
pub fn project(point: &Vec3, k: &CameraIntrinsics) -> Result<((f64, f64), f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok(((k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy), point.z))
}

pub fn cam_to_world(point: &Vec3, pose: &CameraPose) -> Vec3 {
    pose.cam_to_world(point)
}

pub fn world_to_cam(point: &Vec3, pose: &CameraPose) -> Vec3 {
    pose.world_to_cam(point)
}

/// Plücker coordinates `(d, o × d)` of the ray through `origin` along `direction`.
/// The direction is normalized, so any positive rescaling yields the same result.
pub fn plucker_ray(origin: &Vec3, direction: &Vec3) -> [f64; 6] {
    let d = direction.normalize();
    let m = origin.cross(&d);
    [d.x, d.y, d.z, m.x, m.y, m.z]
}

/// Per-pixel ray embedding `(direction, moment)` at pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, six channels per pixel.
    pub data: Vec<[f32; 6]>,
}

impl PluckerImage {
    pub fn get(&self, u: u32, v: u32) -> [f32; 6] {
        self.data[v as usize * self.width as usize + u as usize]
    }
}

pub fn plucker_image(k: &CameraIntrinsics, pose: &CameraPose) -> PluckerImage {
    let mut data = Vec::with_capacity(k.pixel_count());
    for v in 0..k.height {
        for u in 0..k.width {
            let dir_cam = Vec3::new(
                (u as f64 + 0.5 - k.cx) / k.fx,
                (v as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let ray = plucker_ray(&pose.center, &(pose.rotation * dir_cam));
            data.push(ray.map(|c| c as f32));
        }
    }
    PluckerImage {
        width: k.width,
        height: k.height,
        data,
    }
}

/// One frame's camera: intrinsics and pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()
    }
}

/// Dense per-frame cameras of a video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraSequence {
    pub cameras: Vec<Camera>,
}

impl CameraSequence {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let seq = Self { cameras };
        seq.validate()?;
        Ok(seq)
    }

    pub fn constant(camera: Camera, len: usize) -> Self {
        Self {
            cameras: vec![camera; len],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::InvalidCamera(format!("frame {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Camera> {
        self.cameras.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Camera> {
        self.cameras.iter()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.cameras.iter().map(|c| c.pose.center).collect()
    }

    pub fn to_json(&self) -> String {
        let records: Vec<CameraRecord> = self.cameras.iter().map(CameraRecord::from).collect();
        serde_json::to_string_pretty(&records).expect("camera records serialize")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let records: Vec<CameraRecord> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        let cameras = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| Camera::try_from(r).map_err(|e| format!("frame {i}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { cameras })
    }
}

impl std::ops::Index<usize> for CameraSequence {
    type Output = Camera;
    fn index(&self, i: usize) -> &Camera {
        &self.cameras[i]
    }
}

/// On-disk form of a camera: `{fx, fy, cx, cy, width, height, rotation: [9 row-major], center: [3]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        CameraRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: mat_to_rows(&c.pose.rotation),
            center: c.pose.center.into(),
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;
    fn try_from(r: CameraRecord) -> Result<Self> {
        let intrinsics = CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        let pose = CameraPose::new(Mat3::from_row_slice(&r.rotation), Vec3::from(r.center))?;
        Ok(Camera { intrinsics, pose })
    }
}
