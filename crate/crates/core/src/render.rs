//! Z-buffered point-splat rendering.
//!
//! Every point is transformed into the camera, projected, and splatted as a
//! square of side `2 * point_radius + 1` centered on its rounded pixel
//! (`floor(u + 0.5)`). Points at or in front of the near plane, or whose
//! center pixel falls outside the image, are dropped. Each pixel keeps the
//! nearest point; equal depths resolve to the lowest canonical index, which
//! is the position of the point when the input layers are concatenated.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraSequence};
use crate::image::{Grid, Mask, Rgb, RgbImage};
use crate::pointcloud::{FramePointCloud, PersistentCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub point_radius: u32,
    pub near_clip: f64,
    pub background: Rgb,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            point_radius: 0,
            near_clip: 1e-4,
            background: [0.0; 3],
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.near_clip.is_finite() && self.near_clip > 0.0) {
            return Err(Error::Config(format!(
                "near_clip must be positive, got {}",
                self.near_clip
            )));
        }
        Ok(())
    }
}

/// Rendered color, binary coverage mask and nearest depth (`+inf` where
/// nothing was splatted).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub alpha: Mask,
    pub depth: Grid<f64>,
}

impl RenderOutput {
    pub fn coverage(&self) -> usize {
        self.alpha.count()
    }
}

/// Renders the concatenation of `layers` into `camera`.
pub fn render_frame(
    layers: &[&FramePointCloud],
    camera: &Camera,
    opts: &RenderOptions,
) -> RenderOutput {
    render_until(layers, camera, opts, || false).expect("render without cancellation")
}

/// Like [`render_frame`], but gives up and returns `None` once `cancel` is
/// set. The flag is polled every few thousand points.
pub fn render_frame_cancellable(
    layers: &[&FramePointCloud],
    camera: &Camera,
    opts: &RenderOptions,
    cancel: &AtomicBool,
) -> Option<RenderOutput> {
    render_until(layers, camera, opts, || cancel.load(Ordering::Relaxed))
}

const CANCEL_POLL: usize = 1 << 14;

fn render_until(
    layers: &[&FramePointCloud],
    camera: &Camera,
    opts: &RenderOptions,
    cancelled: impl Fn() -> bool,
) -> Option<RenderOutput> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width as i64, k.height as i64);
    let n = k.pixel_count();
    let r = opts.point_radius as i64;

    let mut depth = vec![f64::INFINITY; n];
    let mut winner: Vec<u32> = vec![u32::MAX; n];
    assert!(layers.len() <= u16::MAX as usize, "too many point layers");
    let mut winner_layer: Vec<u16> = vec![0; n];

    for (li, layer) in layers.iter().enumerate() {
        for (pi, p) in layer.positions.iter().enumerate() {
            if pi % CANCEL_POLL == 0 && cancelled() {
                return None;
            }
            let c = camera.pose.world_to_cam(p);
            let z = c.z;
            if !(z > opts.near_clip) {
                continue;
            }
            let u = k.fx * c.x / z + k.cx;
            let v = k.fy * c.y / z + k.cy;
            let pu = (u + 0.5).floor();
            let pv = (v + 0.5).floor();
            if !(pu >= 0.0 && pu < w as f64 && pv >= 0.0 && pv < h as f64) {
                continue;
            }
            let (pu, pv) = (pu as i64, pv as i64);
            for y in (pv - r).max(0)..=(pv + r).min(h - 1) {
                let row = (y * w) as usize;
                for x in (pu - r).max(0)..=(pu + r).min(w - 1) {
                    let i = row + x as usize;
                    // Strict comparison: points arrive in canonical order, so
                    // the first one at a given depth keeps the pixel.
                    if z < depth[i] {
                        depth[i] = z;
                        winner[i] = pi as u32;
                        winner_layer[i] = li as u16;
                    }
                }
            }
        }
    }

    let color = (0..n)
        .map(|i| {
            if winner[i] == u32::MAX {
                opts.background
            } else {
                layers[winner_layer[i] as usize].colors[winner[i] as usize]
            }
        })
        .collect();
    let alpha = winner.iter().map(|&w| w != u32::MAX).collect();
    Some(RenderOutput {
        color: Grid {
            width: k.width,
            height: k.height,
            data: color,
        },
        alpha: Grid {
            width: k.width,
            height: k.height,
            data: alpha,
        },
        depth: Grid {
            width: k.width,
            height: k.height,
            data: depth,
        },
    })
}

/// Renders `visible_set(i)` into `cams[i]` for every frame.
pub fn render_video(
    cloud: &PersistentCloud,
    cams: &CameraSequence,
    opts: &RenderOptions,
) -> Result<Vec<RenderOutput>> {
    if cams.len() != cloud.frame_count() {
        return Err(Error::Shape(format!(
            "{} cameras for a cloud of {} frames",
            cams.len(),
            cloud.frame_count()
        )));
    }
    let mapping: Vec<usize> = (0..cams.len()).collect();
    render_video_mapped(cloud, cams, &mapping, opts)
}

/// Renders `visible_set(mapping[i])` into `cams[i]`.
pub fn render_video_mapped(
    cloud: &PersistentCloud,
    cams: &CameraSequence,
    mapping: &[usize],
    opts: &RenderOptions,
) -> Result<Vec<RenderOutput>> {
    opts.validate()?;
    if mapping.len() != cams.len() {
        return Err(Error::Shape(format!(
            "frame mapping has {} entries for {} cameras",
            mapping.len(),
            cams.len()
        )));
    }
    if let Some(&bad) = mapping.iter().find(|&&f| f >= cloud.frame_count()) {
        return Err(Error::Shape(format!(
            "frame mapping refers to frame {bad}, cloud has {}",
            cloud.frame_count()
        )));
    }
    Ok(cams
        .cameras
        .par_iter()
        .zip(mapping.par_iter())
        .map(|(cam, &f)| render_frame(&cloud.visible_set(f), cam, opts))
        .collect())
}
