//! World-space point clouds lifted from depth video, the temporally-persistent
//! cloud built from them, and cloud editing.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_unchecked, Camera, SimilarityTransform, Vec3};
use crate::image::{Grid, Mask, Rgb, RgbImage};

/// Where a point came from: source tag (input cloud), frame and pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: u16,
    pub frame: u32,
    pub u: u32,
    pub v: u32,
}

/// Colored world-space points with static flags and provenance, stored as
/// parallel arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FramePointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Rgb>,
    pub is_static: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

/// Borrowed view of a single point.
#[derive(Debug, Clone, Copy)]
pub struct PointRef<'a> {
    pub position: &'a Vec3,
    pub color: &'a Rgb,
    pub is_static: bool,
    pub provenance: &'a Provenance,
}

impl FramePointCloud {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            is_static: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vec3, color: Rgb, is_static: bool, provenance: Provenance) {
        self.positions.push(position);
        self.colors.push(color);
        self.is_static.push(is_static);
        self.provenance.push(provenance);
    }

    pub fn point(&self, i: usize) -> PointRef<'_> {
        PointRef {
            position: &self.positions[i],
            color: &self.colors[i],
            is_static: self.is_static[i],
            provenance: &self.provenance[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PointRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    pub fn extend_from(&mut self, other: &FramePointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.is_static.extend_from_slice(&other.is_static);
        self.provenance.extend_from_slice(&other.provenance);
    }

    /// Points for which `keep` returns true, in order.
    pub fn filtered(&self, mut keep: impl FnMut(PointRef<'_>) -> bool) -> FramePointCloud {
        let mut out = FramePointCloud::default();
        for i in 0..self.len() {
            let p = self.point(i);
            if keep(p) {
                out.push(*p.position, *p.color, p.is_static, *p.provenance);
            }
        }
        out
    }

    pub fn static_count(&self) -> usize {
        self.is_static.iter().filter(|&&s| s).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.colors.len() != n || self.is_static.len() != n || self.provenance.len() != n {
            return Err(Error::Shape("point cloud arrays differ in length".into()));
        }
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Shape(format!("point {i} has a non-finite position")));
        }
        Ok(())
    }

    pub fn transform(&mut self, s: &SimilarityTransform) {
        for p in &mut self.positions {
            *p = s.apply(p);
        }
    }

    fn max_source(&self) -> Option<u16> {
        self.provenance.iter().map(|p| p.source).max()
    }
}

/// A depth sample usable for lifting. `f32` depth maps come from disk,
/// `f64` ones from render depth buffers.
pub trait DepthSample: Copy + Send + Sync {
    fn depth(self) -> f64;
}

impl DepthSample for f32 {
    fn depth(self) -> f64 {
        self as f64
    }
}

impl DepthSample for f64 {
    fn depth(self) -> f64 {
        self
    }
}

/// Lifts one frame to world space: one point per pixel with finite positive
/// depth, sampled at integer pixel coordinates. Pixels with depth `<= 0`,
/// NaN or infinity are skipped.
pub fn lift_frame<D: DepthSample>(
    image: &RgbImage,
    depth: &Grid<D>,
    mask: &Mask,
    camera: &Camera,
    frame_index: u32,
) -> Result<FramePointCloud> {
    let k = &camera.intrinsics;
    image.check_dims(k.width, k.height, "image")?;
    depth.check_dims(k.width, k.height, "depth map")?;
    mask.check_dims(k.width, k.height, "static mask")?;

    let width = k.width as usize;
    let rows: Vec<FramePointCloud> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            let mut row = FramePointCloud::with_capacity(width);
            let base = v as usize * width;
            for u in 0..k.width {
                let i = base + u as usize;
                let d = depth.data[i].depth();
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let cam = unproject_unchecked(u as f64, v as f64, d, k);
                row.push(
                    camera.pose.cam_to_world(&cam),
                    image.data[i],
                    mask.data[i],
                    Provenance {
                        source: 0,
                        frame: frame_index,
                        u,
                        v,
                    },
                );
            }
            row
        })
        .collect();

    let mut out = FramePointCloud::with_capacity(rows.iter().map(|r| r.len()).sum());
    for row in &rows {
        out.extend_from(row);
    }
    Ok(out)
}

/// Static points from every frame, visible at all times, plus per-frame
/// dynamic points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PersistentCloud {
    pub static_points: FramePointCloud,
    pub dynamic_by_frame: Vec<FramePointCloud>,
}

impl PersistentCloud {
    pub fn empty(frame_count: usize) -> Self {
        Self {
            static_points: FramePointCloud::default(),
            dynamic_by_frame: vec![FramePointCloud::default(); frame_count],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.dynamic_by_frame.len()
    }

    /// Total number of stored points.
    pub fn len(&self) -> usize {
        self.static_points.len() + self.dynamic_by_frame.iter().map(|d| d.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point layers visible at frame `i`, in canonical order: the static pool
    /// followed by that frame's dynamic points. Frames beyond the stored
    /// range see only the static pool.
    pub fn visible_set(&self, i: usize) -> Vec<&FramePointCloud> {
        match self.dynamic_by_frame.get(i) {
            Some(d) => vec![&self.static_points, d],
            None => vec![&self.static_points],
        }
    }

    pub fn visible_count(&self, i: usize) -> usize {
        self.visible_set(i).iter().map(|l| l.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.static_points.validate()?;
        if self.static_points.is_static.iter().any(|&s| !s) {
            return Err(Error::Shape("static pool holds a dynamic point".into()));
        }
        for (i, d) in self.dynamic_by_frame.iter().enumerate() {
            d.validate()?;
            if d.is_static.iter().any(|&s| s) {
                return Err(Error::Shape(format!(
                    "dynamic list of frame {i} holds a static point"
                )));
            }
        }
        Ok(())
    }

    pub fn transform(&mut self, s: &SimilarityTransform) {
        self.static_points.transform(s);
        for d in &mut self.dynamic_by_frame {
            d.transform(s);
        }
    }

    fn max_source(&self) -> Option<u16> {
        std::iter::once(&self.static_points)
            .chain(&self.dynamic_by_frame)
            .filter_map(|c| c.max_source())
            .max()
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut FramePointCloud> {
        std::iter::once(&mut self.static_points).chain(self.dynamic_by_frame.iter_mut())
    }

    /// Appends one new frame: its static points join the pool, its dynamic
    /// points become the new frame's list.
    pub fn push_frame(&mut self, frame: &FramePointCloud) {
        let (stat, dynamic) = split_static(frame);
        self.static_points.extend_from(&stat);
        self.dynamic_by_frame.push(dynamic);
    }
}

fn split_static(frame: &FramePointCloud) -> (FramePointCloud, FramePointCloud) {
    (frame.filtered(|p| p.is_static), frame.filtered(|p| !p.is_static))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PersistOptions {
    /// Keep only the first static point per voxel of this edge length.
    pub dedup_voxel: Option<f64>,
}

pub fn build_persistent(frames: &[FramePointCloud]) -> Result<PersistentCloud> {
    build_persistent_with(frames, &PersistOptions::default())
}

pub fn build_persistent_with(
    frames: &[FramePointCloud],
    opts: &PersistOptions,
) -> Result<PersistentCloud> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to persist".into()));
    }
    let mut cloud = PersistentCloud::empty(0);
    for f in frames {
        cloud.push_frame(f);
    }
    if let Some(edge) = opts.dedup_voxel {
        if !(edge.is_finite() && edge > 0.0) {
            return Err(Error::Config(format!("voxel edge must be positive, got {edge}")));
        }
        let mut seen = HashSet::new();
        cloud.static_points = cloud.static_points.filtered(|p| {
            let key = p.position.map(|c| (c / edge).floor() as i64);
            seen.insert((key.x, key.y, key.z))
        });
    }
    Ok(cloud)
}

fn retag(cloud: &mut PersistentCloud, offset: u16) {
    if offset == 0 {
        return;
    }
    for layer in cloud.layers_mut() {
        for p in &mut layer.provenance {
            p.source = p.source.saturating_add(offset);
        }
    }
}

/// Fuses two clouds. `b` is transformed by `align` first and its source tags
/// are shifted past those of `a`. Dynamic lists are merged by frame index;
/// a missing frame counts as empty.
pub fn merge_clouds(
    a: &PersistentCloud,
    b: &PersistentCloud,
    align: Option<&SimilarityTransform>,
) -> PersistentCloud {
    let mut b = b.clone();
    if let Some(s) = align {
        b.transform(s);
    }
    let offset = match a.max_source() {
        Some(m) if !b.is_empty() => m + 1,
        _ => 0,
    };
    retag(&mut b, offset);

    let frames = a.frame_count().max(b.frame_count());
    let mut out = a.clone();
    out.dynamic_by_frame.resize(frames, FramePointCloud::default());
    out.static_points.extend_from(&b.static_points);
    for (i, d) in b.dynamic_by_frame.iter().enumerate() {
        out.dynamic_by_frame[i].extend_from(d);
    }
    out
}

/// Point selection for cloud edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Selector {
    All,
    Nothing,
    Static,
    Dynamic,
    Frame { frame: u32 },
    Source { source: u16 },
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Pixel rectangle in provenance coordinates, inclusive.
    PixelRect { u0: u32, v0: u32, u1: u32, v1: u32 },
    And { all: Vec<Selector> },
    Or { any: Vec<Selector> },
    Not { not: Box<Selector> },
}

impl Selector {
    pub fn matches(&self, p: &PointRef<'_>) -> bool {
        match self {
            Selector::All => true,
            Selector::Nothing => false,
            Selector::Static => p.is_static,
            Selector::Dynamic => !p.is_static,
            Selector::Frame { frame } => p.provenance.frame == *frame,
            Selector::Source { source } => p.provenance.source == *source,
            Selector::Box { min, max } => (0..3).all(|c| {
                p.position[c] >= min[c] && p.position[c] <= max[c]
            }),
            Selector::Sphere { center, radius } => {
                (p.position - Vec3::from(*center)).norm() <= *radius
            }
            Selector::PixelRect { u0, v0, u1, v1 } => {
                let pr = p.provenance;
                (*u0..=*u1).contains(&pr.u) && (*v0..=*v1).contains(&pr.v)
            }
            Selector::And { all } => all.iter().all(|s| s.matches(p)),
            Selector::Or { any } => any.iter().any(|s| s.matches(p)),
            Selector::Not { not } => !not.matches(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EditAction {
    Delete,
    Transform { transform: SimilarityTransform },
    /// Inserts transformed copies of the selection under a fresh source tag.
    Duplicate { transform: SimilarityTransform },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOp {
    pub select: Selector,
    pub action: EditAction,
}

/// Applies edit operations in order. Dynamic points keep their frame.
pub fn edit_cloud(cloud: &PersistentCloud, ops: &[EditOp]) -> PersistentCloud {
    let mut out = cloud.clone();
    for op in ops {
        match &op.action {
            EditAction::Delete => {
                for layer in out.layers_mut() {
                    *layer = layer.filtered(|p| !op.select.matches(&p));
                }
            }
            EditAction::Transform { transform } => {
                for layer in out.layers_mut() {
                    for i in 0..layer.len() {
                        if op.select.matches(&layer.point(i)) {
                            layer.positions[i] = transform.apply(&layer.positions[i]);
                        }
                    }
                }
            }
            EditAction::Duplicate { transform } => {
                let tag = out.max_source().map_or(0, |m| m.saturating_add(1));
                for layer in out.layers_mut() {
                    let mut copies = layer.filtered(|p| op.select.matches(&p));
                    copies.transform(transform);
                    for p in &mut copies.provenance {
                        p.source = tag;
                    }
                    layer.extend_from(&copies);
                }
            }
        }
    }
    out
}
