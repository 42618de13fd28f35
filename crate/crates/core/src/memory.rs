//! Long-video memory: chunk reconstructions that re-observe a few earlier
//! anchor frames are registered into one growing global cloud.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::ReconInput;
use crate::error::{Error, Result};
use crate::eval::umeyama;
use crate::geometry::{rotation_distance, Camera, CameraSequence, SimilarityTransform, Vec3};
use crate::image::{DepthMap, Mask, RgbImage};
use crate::pointcloud::{lift_frame, PersistentCloud};
use crate::scene_io::{load_cameras, load_cloud, read_file, save_cameras, save_cloud, write_file};

/// `k` evenly strided indices over `[0, count)`, including both ends when
/// `k >= 2`. Returns every index when `k >= count`.
pub fn subsample_anchors(count: usize, k: usize) -> Vec<usize> {
    if k >= count {
        return (0..count).collect();
    }
    match k {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..k)
            .map(|j| ((j * (count - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect(),
    }
}

/// One chunk's joint reconstruction in its own coordinate frame.
/// `anchor_map` pairs chunk-local frame indices with the global frames they
/// re-observe; every other local frame is new.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkReconstruction {
    pub frames: Vec<RgbImage>,
    pub depths: Vec<DepthMap>,
    pub local_cams: CameraSequence,
    pub static_masks: Vec<Mask>,
    pub anchor_map: Vec<(usize, usize)>,
}

impl ChunkReconstruction {
    pub fn as_recon(&self) -> ReconInput {
        ReconInput {
            frames: self.frames.clone(),
            depths: self.depths.clone(),
            cams: self.local_cams.clone(),
            static_masks: self.static_masks.clone(),
        }
    }

    /// Local indices of the frames that are not anchors, in order.
    pub fn new_frames(&self) -> Vec<usize> {
        let anchors: HashSet<usize> = self.anchor_map.iter().map(|a| a.0).collect();
        (0..self.frames.len()).filter(|i| !anchors.contains(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub with_scale: bool,
    /// Misregistration limit as a fraction of the bounding-box diagonal of
    /// the existing camera centers.
    pub max_residual_ratio: f64,
    /// Fitted transforms this close to identity are replaced by identity.
    pub snap_tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            with_scale: true,
            max_residual_ratio: 0.05,
            snap_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub chunk: usize,
    /// Chunk-local to global.
    pub transform: SimilarityTransform,
    pub anchors: Vec<(usize, usize)>,
    pub mean_residual: f64,
    pub max_residual: f64,
    pub residual_limit: f64,
    /// Mean geodesic angle between registered and known anchor rotations, degrees.
    pub rotation_residual_deg: f64,
    pub first_new_frame: usize,
    pub new_frames: usize,
    pub static_points_added: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub cloud: PersistentCloud,
    pub cams: CameraSequence,
    pub log: Vec<RegistrationRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    frame_count: usize,
    log: Vec<RegistrationRecord>,
}

impl GlobalState {
    pub fn from_recon(input: &ReconInput) -> Result<Self> {
        Ok(Self {
            cloud: input.persistent_cloud()?,
            cams: input.cams.clone(),
            log: Vec::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.cams.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cloud.frame_count() != self.cams.len() {
            return Err(Error::Shape(format!(
                "cloud covers {} frames, {} cameras",
                self.cloud.frame_count(),
                self.cams.len()
            )));
        }
        self.cloud.validate()?;
        self.cams.validate()
    }

    /// Writes `cloud.ply`, `cameras.json` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        save_cloud(&self.cloud, &dir.join("cloud.ply"))?;
        save_cameras(&dir.join("cameras.json"), &self.cams)?;
        let state = StateFile {
            frame_count: self.frame_count(),
            log: self.log.clone(),
        };
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        write_file(&dir.join("state.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let state_path: PathBuf = dir.join("state.json");
        let state: StateFile =
            serde_json::from_slice(&read_file(&state_path)?).map_err(|e| Error::Json {
                path: state_path.clone(),
                source: e,
            })?;
        let mut cloud = load_cloud(&dir.join("cloud.ply"))?;
        if cloud.frame_count() < state.frame_count {
            cloud
                .dynamic_by_frame
                .resize_with(state.frame_count, Default::default);
        }
        let s = Self {
            cloud,
            cams: load_cameras(&dir.join("cameras.json"))?,
            log: state.log,
        };
        if s.frame_count() != state.frame_count {
            return Err(Error::CountMismatch {
                sequence: "cameras".into(),
                expected: state.frame_count,
                found: s.frame_count(),
            });
        }
        s.validate()?;
        Ok(s)
    }
}

fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (lo, hi) = points
        .iter()
        .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    (hi - lo).norm()
}

fn snap(s: SimilarityTransform, tol: f64) -> SimilarityTransform {
    let near = (s.scale - 1.0).abs() <= tol
        && (s.rotation - crate::geometry::Mat3::identity()).amax() <= tol
        && s.translation.amax() <= tol;
    if near {
        SimilarityTransform::identity()
    } else {
        s
    }
}

/// Fits the chunk-to-global similarity on anchor camera centers, then
/// appends the chunk's new frames: cameras mapped into global coordinates,
/// static points into the persistent pool and dynamic points into new
/// per-frame lists. Anchor frames contribute nothing.
pub fn register_chunk(
    state: &GlobalState,
    chunk: &ChunkReconstruction,
    cfg: &RegistrationConfig,
) -> Result<GlobalState> {
    state.validate()?;
    chunk.as_recon().validate()?;
    if chunk.anchor_map.len() < 3 {
        return Err(Error::Registration(format!(
            "need at least 3 anchors, chunk has {}",
            chunk.anchor_map.len()
        )));
    }
    let mut seen = HashSet::new();
    for &(local, global) in &chunk.anchor_map {
        if local >= chunk.frames.len() || global >= state.frame_count() {
            return Err(Error::Registration(format!(
                "anchor ({local} -> {global}) outside chunk of {} or state of {} frames",
                chunk.frames.len(),
                state.frame_count()
            )));
        }
        if !seen.insert(local) {
            return Err(Error::Registration(format!("local frame {local} anchored twice")));
        }
    }

    let src: Vec<Vec3> = chunk
        .anchor_map
        .iter()
        .map(|&(l, _)| chunk.local_cams[l].pose.center)
        .collect();
    let dst: Vec<Vec3> = chunk
        .anchor_map
        .iter()
        .map(|&(_, g)| state.cams[g].pose.center)
        .collect();
    let fitted = umeyama(&src, &dst, cfg.with_scale).map_err(|e| match e {
        Error::Rank(m) => Error::Registration(format!("anchor centers are degenerate: {m}")),
        other => other,
    })?;
    let transform = snap(fitted, cfg.snap_tolerance);

    let residuals: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (transform.apply(s) - d).norm())
        .collect();
    let mean_residual = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
    let residual_limit = cfg.max_residual_ratio * bbox_diagonal(&state.cams.centers());
    if mean_residual > residual_limit {
        return Err(Error::Misregistration {
            residual: mean_residual,
            limit: residual_limit,
        });
    }
    let rotation_residual_deg = chunk
        .anchor_map
        .iter()
        .map(|&(l, g)| {
            let r = transform.rotation * chunk.local_cams[l].pose.rotation;
            rotation_distance(&r, &state.cams[g].pose.rotation).to_degrees()
        })
        .sum::<f64>()
        / chunk.anchor_map.len() as f64;

    let identity = transform.is_identity();
    let mut next = state.clone();
    let first_new_frame = state.frame_count();
    let new_frames = chunk.new_frames();
    let static_before = next.cloud.static_points.len();
    for (j, &l) in new_frames.iter().enumerate() {
        let global = first_new_frame + j;
        let mut points = lift_frame(
            &chunk.frames[l],
            &chunk.depths[l],
            &chunk.static_masks[l],
            &chunk.local_cams[l],
            global as u32,
        )?;
        let local = chunk.local_cams[l];
        let pose = if identity {
            local.pose
        } else {
            points.transform(&transform);
            transform.apply_pose(&local.pose)
        };
        next.cloud.push_frame(&points);
        next.cams.cameras.push(Camera::new(local.intrinsics, pose));
    }

    next.log.push(RegistrationRecord {
        chunk: state.log.len(),
        transform,
        anchors: chunk.anchor_map.clone(),
        mean_residual,
        max_residual,
        residual_limit,
        rotation_residual_deg,
        first_new_frame,
        new_frames: new_frames.len(),
        static_points_added: next.cloud.static_points.len() - static_before,
    });
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_subsampling() {
        assert_eq!(subsample_anchors(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_anchors(100, 2), vec![0, 99]);
        assert_eq!(subsample_anchors(5, 1), vec![0]);
        assert_eq!(subsample_anchors(3, 9), vec![0, 1, 2]);
        let idx = subsample_anchors(49, 8);
        assert_eq!(idx.len(), 8);
        assert_eq!((idx[0], idx[7]), (0, 48));
        assert!(idx.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= 48usize.div_ceil(7)));
    }
}
