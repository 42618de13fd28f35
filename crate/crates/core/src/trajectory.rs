//! Camera trajectories: keyframe interpolation with per-key tension,
//! Gaussian smoothing, heuristic source cameras and first-frame retargeting.
//!
//! Camera centers follow a Kochanek–Bartels spline (continuity and bias fixed
//! at zero), rotations are slerped along the shortest arc, and the vertical
//! field of view is interpolated linearly in degrees.

use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::geometry::CameraSequence;
use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, check_rotation, mat_to_rows, quaternion_from_matrix, Camera, CameraIntrinsics,
    CameraPose, Mat3, Vec3,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraKeyframe {
    pub frame_index: usize,
    pub pose: CameraPose,
    /// Vertical field of view in degrees.
    pub fov_v: f64,
    /// Spline tension in `[-1, 1]`; 1 stops at the key, −1 overshoots.
    pub tension: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeTrack {
    pub keyframes: Vec<CameraKeyframe>,
    pub total_frames: usize,
    /// Optional Gaussian σ (frames) applied after interpolation.
    pub smoothness: Option<f64>,
}

/// Wire form shared with the camera-designer UI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeTrackRecord {
    pub total_frames: usize,
    pub keyframes: Vec<KeyframeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeRecord {
    pub frame: usize,
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub fov_v: f64,
    #[serde(default)]
    pub tension: f64,
}

impl KeyframeTrack {
    /// Every violated constraint, empty when the track is valid.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.keyframes.is_empty() {
            errs.push("track needs at least one keyframe".to_string());
        }
        if self.total_frames == 0 {
            errs.push("total_frames must be at least 1".to_string());
        }
        for (i, k) in self.keyframes.iter().enumerate() {
            if i > 0 && k.frame_index <= self.keyframes[i - 1].frame_index {
                errs.push(format!(
                    "keyframes[{i}]: frame {} is not after frame {}",
                    k.frame_index,
                    self.keyframes[i - 1].frame_index
                ));
            }
            if k.frame_index >= self.total_frames {
                errs.push(format!(
                    "keyframes[{i}]: frame {} outside [0, {})",
                    k.frame_index, self.total_frames
                ));
            }
            if !(k.fov_v > 0.0 && k.fov_v < 180.0) {
                errs.push(format!("keyframes[{i}]: fov_v {} outside (0, 180)", k.fov_v));
            }
            if !(-1.0..=1.0).contains(&k.tension) {
                errs.push(format!("keyframes[{i}]: tension {} outside [-1, 1]", k.tension));
            }
            if let Err(e) = k.pose.validate() {
                errs.push(format!("keyframes[{i}]: {e}"));
            }
        }
        if let Some(s) = self.smoothness {
            if !(s.is_finite() && s >= 0.0) {
                errs.push(format!("smoothness {s} must be a non-negative number"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn from_record(r: &KeyframeTrackRecord) -> Self {
        KeyframeTrack {
            total_frames: r.total_frames,
            smoothness: r.smoothness,
            keyframes: r
                .keyframes
                .iter()
                .map(|k| CameraKeyframe {
                    frame_index: k.frame,
                    pose: CameraPose {
                        rotation: Mat3::from_row_slice(&k.rotation),
                        center: Vec3::from(k.center),
                    },
                    fov_v: k.fov_v,
                    tension: k.tension,
                })
                .collect(),
        }
    }

    pub fn to_record(&self) -> KeyframeTrackRecord {
        KeyframeTrackRecord {
            total_frames: self.total_frames,
            smoothness: self.smoothness,
            keyframes: self
                .keyframes
                .iter()
                .map(|k| KeyframeRecord {
                    frame: k.frame_index,
                    rotation: mat_to_rows(&k.pose.rotation),
                    center: k.pose.center.into(),
                    fov_v: k.fov_v,
                    tension: k.tension,
                })
                .collect(),
        }
    }

    /// Parses and validates the JSON wire format.
    pub fn from_json(text: &str) -> Result<Self> {
        let record: KeyframeTrackRecord = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid track JSON: {e}")))?;
        let track = Self::from_record(&record);
        track.validate()?;
        Ok(track)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("track serializes")
    }
}

fn hermite(p0: &Vec3, m0: &Vec3, p1: &Vec3, m1: &Vec3, s: f64) -> Vec3 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    p0 * h00 + m0 * h10 + p1 * h01 + m1 * h11
}

/// Derivative at `t0` of the parabola through `(t0,p0)`, `(t1,p1)`, `(t2,p2)`.
fn parabola_slope(t: [f64; 3], p: [&Vec3; 3]) -> Vec3 {
    let [t0, t1, t2] = t;
    p[0] * ((2.0 * t0 - t1 - t2) / ((t0 - t1) * (t0 - t2)))
        + p[1] * ((t0 - t2) / ((t1 - t0) * (t1 - t2)))
        + p[2] * ((t0 - t1) / ((t2 - t0) * (t2 - t1)))
}

/// Outgoing (`.0`) and incoming (`.1`) tangents of each key, expressed per
/// unit of the adjacent segment's local parameter.
fn kb_tangents(keys: &[CameraKeyframe]) -> Vec<(Vec3, Vec3)> {
    let n = keys.len();
    let t: Vec<f64> = keys.iter().map(|k| k.frame_index as f64).collect();
    let p: Vec<Vec3> = keys.iter().map(|k| k.pose.center).collect();
    (0..n)
        .map(|k| {
            let a = 1.0 - keys[k].tension;
            if n < 2 {
                return (Vec3::zeros(), Vec3::zeros());
            }
            if k == 0 {
                let slope = if n == 2 {
                    (p[1] - p[0]) / (t[1] - t[0])
                } else {
                    parabola_slope([t[0], t[1], t[2]], [&p[0], &p[1], &p[2]])
                };
                let m = slope * (t[1] - t[0]) * a;
                return (m, m);
            }
            if k == n - 1 {
                let slope = if n == 2 {
                    (p[1] - p[0]) / (t[1] - t[0])
                } else {
                    parabola_slope([t[k], t[k - 1], t[k - 2]], [&p[k], &p[k - 1], &p[k - 2]])
                };
                let m = slope * (t[k] - t[k - 1]) * a;
                return (m, m);
            }
            let before = t[k] - t[k - 1];
            let after = t[k + 1] - t[k];
            let base = (p[k + 1] - p[k - 1]) * (a / 2.0);
            let outgoing = base * (2.0 * after / (before + after));
            let incoming = base * (2.0 * before / (before + after));
            (outgoing, incoming)
        })
        .collect()
}

/// Shortest-arc spherical interpolation.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot > 1.0 - 1e-12 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin) + qb * ((s * theta).sin() / sin)
    };
    UnitQuaternion::from_quaternion(q)
}

/// Dense per-frame cameras from a keyframe track. Intrinsics take the
/// principal point, image size and `fx / fy` ratio from `base`.
pub fn interpolate_track(track: &KeyframeTrack, base: &CameraIntrinsics) -> Result<CameraSequence> {
    track.validate()?;
    base.validate()?;
    let keys = &track.keyframes;
    let tangents = kb_tangents(keys);
    let quats: Vec<UnitQuaternion<f64>> = keys.iter().map(|k| k.pose.quaternion()).collect();

    let mut cameras = Vec::with_capacity(track.total_frames);
    let mut seg = 0;
    for f in 0..track.total_frames {
        while seg + 1 < keys.len() && keys[seg + 1].frame_index <= f {
            seg += 1;
        }
        let key = &keys[seg];
        let (pose, fov) = if f <= keys[0].frame_index {
            (keys[0].pose, keys[0].fov_v)
        } else if f == key.frame_index || seg + 1 == keys.len() {
            (key.pose, key.fov_v)
        } else {
            let next = &keys[seg + 1];
            let s = (f - key.frame_index) as f64 / (next.frame_index - key.frame_index) as f64;
            let center = hermite(
                &key.pose.center,
                &tangents[seg].0,
                &next.pose.center,
                &tangents[seg + 1].1,
                s,
            );
            let q = slerp(&quats[seg], &quats[seg + 1], s);
            (
                CameraPose::from_quaternion(&q, center),
                key.fov_v + (next.fov_v - key.fov_v) * s,
            )
        };
        cameras.push(Camera::new(base.with_fov_v(fov)?, pose));
    }
    let seq = CameraSequence { cameras };
    match track.smoothness {
        Some(sigma) if sigma > 0.0 => gaussian_smooth(&seq, sigma),
        _ => Ok(seq),
    }
}

/// Truncated (±3σ) normalized Gaussian smoothing of centers, vertical FOV
/// and rotations. Weights are renormalized at the sequence ends. Rotations
/// are averaged as quaternions aligned to the hemisphere of the first
/// quaternion in each window.
pub fn gaussian_smooth(seq: &CameraSequence, sigma: f64) -> Result<CameraSequence> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let n = seq.len();
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let quats: Vec<Quaternion<f64>> = seq
        .iter()
        .map(|c| quaternion_from_matrix(&c.pose.rotation).into_inner())
        .collect();

    let mut cameras = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        let total: f64 = (lo..=hi).map(|j| kernel[i.abs_diff(j)]).sum();
        let mut center = Vec3::zeros();
        let mut fov = 0.0;
        let mut q = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        let reference = quats[lo];
        for j in lo..=hi {
            let w = kernel[i.abs_diff(j)] / total;
            let cam = &seq[j];
            center += cam.pose.center * w;
            fov += cam.intrinsics.fov_v_deg() * w;
            let qj = if quats[j].dot(&reference) < 0.0 {
                -quats[j]
            } else {
                quats[j]
            };
            q += qj * w;
        }
        let rotation = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        check_rotation(&rotation)?;
        cameras.push(Camera::new(
            seq[i].intrinsics.with_fov_v(fov)?,
            CameraPose { rotation, center },
        ));
    }
    Ok(CameraSequence { cameras })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicMode {
    /// Rotate about the camera up axis through a pivot point.
    Orbit,
    /// Translate within the image plane.
    Offset,
    /// Move along the viewing axis.
    Dolly,
}

impl FromStr for HeuristicMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "offset" => Ok(Self::Offset),
            "dolly" => Ok(Self::Dolly),
            other => Err(Error::Config(format!(
                "unknown source camera mode {other:?} (expected orbit, offset or dolly)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceCameraSpec {
    pub mode: HeuristicMode,
    /// Radians for orbit, world units for offset and dolly.
    pub magnitude: f64,
    pub seed: u64,
    /// Orbit pivot; defaults to two world units in front of the first camera.
    pub pivot: Option<Vec3>,
}

/// Default orbit pivot distance ahead of the first camera.
pub const DEFAULT_PIVOT_DISTANCE: f64 = 2.0;

fn smooth_ramp(i: usize, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let x = i as f64 / (n - 1) as f64;
    x * x * (3.0 - 2.0 * x)
}

/// Synthetic source cameras derived from a target trajectory. The
/// displacement ramps smoothly from zero at the first frame to the full
/// magnitude at the last. The seed picks the displacement direction.
pub fn heuristic_source_cameras(
    target: &CameraSequence,
    spec: &SourceCameraSpec,
) -> Result<CameraSequence> {
    if !(spec.magnitude.is_finite() && spec.magnitude >= 0.0) {
        return Err(Error::Config(format!(
            "magnitude must be non-negative, got {}",
            spec.magnitude
        )));
    }
    if spec.magnitude == 0.0 || target.is_empty() {
        return Ok(target.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let first = &target[0].pose;
    let pivot = spec
        .pivot
        .unwrap_or(first.center + first.forward() * DEFAULT_PIVOT_DISTANCE);
    let n = target.len();
    let cameras = target
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let amount = spec.magnitude * smooth_ramp(i, n);
            if amount == 0.0 {
                return *cam;
            }
            let pose = &cam.pose;
            let moved = match spec.mode {
                HeuristicMode::Orbit => {
                    let q = axis_angle(&pose.up(), sign * amount);
                    CameraPose {
                        rotation: q * pose.rotation,
                        center: pivot + q * (pose.center - pivot),
                    }
                }
                HeuristicMode::Offset => {
                    let right = pose.rotation.column(0).into_owned();
                    let dir = right * phase.cos() + pose.up() * phase.sin();
                    CameraPose {
                        rotation: pose.rotation,
                        center: pose.center + dir * amount,
                    }
                }
                HeuristicMode::Dolly => CameraPose {
                    rotation: pose.rotation,
                    center: pose.center + pose.forward() * (sign * amount),
                },
            };
            Camera::new(cam.intrinsics, moved)
        })
        .collect();
    Ok(CameraSequence { cameras })
}

/// First-frame retargeting for pipelines that require the source and target
/// trajectories to start at the same camera: frame 0 is the target's first
/// camera and every later frame replays the target's frame-to-frame relative
/// motion on top of the previous output frame. The result has the target's
/// length.
pub fn retarget_first_frame(
    source: &CameraSequence,
    target: &CameraSequence,
) -> Result<CameraSequence> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput(
            "retargeting needs non-empty source and target trajectories".into(),
        ));
    }
    let mut cameras = Vec::with_capacity(target.len());
    cameras.push(target[0]);
    for i in 1..target.len() {
        let motion = target[i]
            .pose
            .as_transform()
            .compose(&target[i - 1].pose.inverse());
        let prev = cameras[i - 1].pose;
        cameras.push(Camera::new(target[i].intrinsics, motion.apply_pose(&prev)));
    }
    Ok(CameraSequence { cameras })
}
