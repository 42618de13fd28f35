//! One design session: an immutable cloud snapshot, the scene cameras, the
//! preview settings and the current keyframe track.

use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use reshoot_core::image::to_u8;
use reshoot_core::memory::GlobalState;
use reshoot_core::render::{render_frame, render_frame_cancellable};
use reshoot_core::scene_io::{encode_rgb_png, load_scene};
use reshoot_core::trajectory::interpolate_track;
use reshoot_core::{
    Camera, CameraIntrinsics, CameraSequence, Error, FramePointCloud, KeyframeTrack,
    PersistentCloud, RenderOptions, RenderOutput, Result,
};

/// Leading bytes of the binary cloud download.
pub const CLOUD_MAGIC: &[u8; 4] = b"RCP1";
/// Bytes per point after the header: 3 × f32 position, 3 × u8 color, u8 static flag.
pub const CLOUD_RECORD_BYTES: usize = 16;
pub const DEFAULT_MAX_POINTS: usize = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreviewSettings {
    /// Resolution scale in `(0, 1]`.
    pub scale: f64,
    /// Fraction of points kept for preview renders, in `(0, 1]`.
    pub point_ratio: f64,
}

impl Default for PreviewSettings {
    fn default() -> Self {
        Self {
            scale: 0.5,
            point_ratio: 1.0,
        }
    }
}

impl PreviewSettings {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            errs.push(format!("preview scale {} outside (0, 1]", self.scale));
        }
        if !(self.point_ratio > 0.0 && self.point_ratio <= 1.0) {
            errs.push(format!("point ratio {} outside (0, 1]", self.point_ratio));
        }
        errs
    }

    /// Preview size for a camera of `width × height`.
    pub fn dims(&self, width: u32, height: u32) -> (u32, u32) {
        let s = |n: u32| ((n as f64 * self.scale).round() as u32).max(1);
        (s(width), s(height))
    }
}

/// The cameras a session currently previews. Version 0 holds the scene's
/// own cameras; every accepted track bumps the version.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub version: u64,
    pub track: Option<KeyframeTrack>,
    pub cams: CameraSequence,
}

pub struct Session {
    pub id: String,
    pub cloud: Arc<PersistentCloud>,
    preview_cloud: Arc<PersistentCloud>,
    pub source_cams: CameraSequence,
    pub base: CameraIntrinsics,
    pub settings: PreviewSettings,
    pub render: RenderOptions,
    track: watch::Sender<Arc<TrackState>>,
}

/// A rendered preview frame and the track version it belongs to.
#[derive(Debug, Clone)]
pub struct PreviewFrame {
    pub version: u64,
    pub frame: usize,
    pub width: u32,
    pub height: u32,
    pub png: Vec<u8>,
}

/// Loads either a memory state directory (holding `state.json`) or a scene
/// manifest.
pub fn load_source(path: &Path) -> Result<(PersistentCloud, CameraSequence)> {
    if path.is_dir() && path.join("state.json").is_file() {
        let state = GlobalState::load(path)?;
        return Ok((state.cloud, state.cams));
    }
    let scene = load_scene(path)?;
    Ok((scene.persistent_cloud()?, scene.cams))
}

/// Keeps point `i` of each layer when `floor((i + 1) r) > floor(i r)`, so
/// a ratio of 1 keeps everything and smaller ratios keep an even stride.
pub fn thin_cloud(cloud: &PersistentCloud, ratio: f64) -> PersistentCloud {
    let thin = |layer: &FramePointCloud| {
        let mut i = 0usize;
        layer.filtered(|_| {
            let keep = ((i + 1) as f64 * ratio).floor() > (i as f64 * ratio).floor();
            i += 1;
            keep
        })
    };
    PersistentCloud {
        static_points: thin(&cloud.static_points),
        dynamic_by_frame: cloud.dynamic_by_frame.iter().map(thin).collect(),
    }
}

/// `n` indices spread evenly over `[0, total)`: `floor(j * total / n)`.
pub fn even_indices(total: usize, n: usize) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    (0..n)
        .map(|j| (j as u128 * total as u128 / n as u128) as usize)
        .collect()
}

/// Binary cloud download: magic, u32 count, then one record per point in
/// canonical order (static pool, then each frame's dynamic points).
pub fn encode_cloud(cloud: &PersistentCloud, max_points: usize) -> Vec<u8> {
    let layers: Vec<&FramePointCloud> = std::iter::once(&cloud.static_points)
        .chain(&cloud.dynamic_by_frame)
        .collect();
    let picks = even_indices(cloud.len(), max_points);
    let mut out = Vec::with_capacity(8 + picks.len() * CLOUD_RECORD_BYTES);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(picks.len() as u32).to_le_bytes());
    let (mut layer, mut offset) = (0usize, 0usize);
    for idx in picks {
        while idx >= offset + layers[layer].len() {
            offset += layers[layer].len();
            layer += 1;
        }
        let p = layers[layer].point(idx - offset);
        for c in p.position.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend(p.color.iter().map(|&c| to_u8(c)));
        out.push(p.is_static as u8);
    }
    out
}

impl Session {
    pub fn new(
        id: String,
        cloud: PersistentCloud,
        source_cams: CameraSequence,
        settings: PreviewSettings,
        render: RenderOptions,
    ) -> Result<Self> {
        let errs = settings.validation_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        render.validate()?;
        cloud.validate()?;
        source_cams.validate()?;
        let base = source_cams
            .get(0)
            .ok_or_else(|| Error::EmptyInput("scene has no cameras".into()))?
            .intrinsics;
        let cloud = Arc::new(cloud);
        let preview_cloud = if settings.point_ratio == 1.0 {
            cloud.clone()
        } else {
            Arc::new(thin_cloud(&cloud, settings.point_ratio))
        };
        let (track, _) = watch::channel(Arc::new(TrackState {
            version: 0,
            track: None,
            cams: source_cams.clone(),
        }));
        Ok(Self {
            id,
            cloud,
            preview_cloud,
            source_cams,
            base,
            settings,
            render,
            track,
        })
    }

    pub fn current(&self) -> Arc<TrackState> {
        self.track.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<TrackState>> {
        self.track.subscribe()
    }

    pub fn preview_points(&self) -> usize {
        self.preview_cloud.len()
    }

    /// Validates and interpolates `track`, then makes it current. Returns the
    /// new state, or every validation message when the track is rejected.
    pub fn set_track(&self, track: KeyframeTrack) -> std::result::Result<Arc<TrackState>, Vec<String>> {
        let errs = track.validation_errors();
        if !errs.is_empty() {
            return Err(errs);
        }
        let cams = interpolate_track(&track, &self.base).map_err(|e| vec![e.to_string()])?;
        let mut out = None;
        self.track.send_modify(|cur| {
            let next = Arc::new(TrackState {
                version: cur.version + 1,
                track: Some(track),
                cams,
            });
            out = Some(next.clone());
            *cur = next;
        });
        Ok(out.expect("send_modify runs the closure"))
    }

    fn preview_camera(&self, state: &TrackState, frame: usize) -> Result<Camera> {
        let cam = state.cams.get(frame).ok_or_else(|| {
            Error::Shape(format!(
                "frame {frame} outside the current track of {} frames",
                state.cams.len()
            ))
        })?;
        let k = &cam.intrinsics;
        let (w, h) = self.settings.dims(k.width, k.height);
        let intrinsics = if (w, h) == (k.width, k.height) {
            *k
        } else {
            k.resized(w, h)?
        };
        Ok(Camera::new(intrinsics, cam.pose))
    }

    /// Renders `frame` of `state` at preview settings. Frames past the
    /// cloud's last frame reuse its dynamic points. `None` means the render
    /// was cancelled.
    pub fn render_preview(
        &self,
        state: &TrackState,
        frame: usize,
        cancel: Option<&AtomicBool>,
    ) -> Result<Option<PreviewFrame>> {
        let cam = self.preview_camera(state, frame)?;
        let last = self.preview_cloud.frame_count().saturating_sub(1);
        let layers = self.preview_cloud.visible_set(frame.min(last));
        let out: Option<RenderOutput> = match cancel {
            Some(flag) => render_frame_cancellable(&layers, &cam, &self.render, flag),
            None => Some(render_frame(&layers, &cam, &self.render)),
        };
        Ok(out.map(|o| PreviewFrame {
            version: state.version,
            frame,
            width: cam.intrinsics.width,
            height: cam.intrinsics.height,
            png: encode_rgb_png(&o.color),
        }))
    }
}
