//! Conditioning bundles: double reprojection of monocular video and noisy
//! multiview renders, plus their on-disk form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{plucker_image, CameraSequence, PluckerImage};
use crate::image::{DepthMap, Grid, Mask, RgbImage};
use crate::pointcloud::{build_persistent, lift_frame, FramePointCloud, PersistentCloud};
use crate::render::{render_frame, render_video, RenderOptions, RenderOutput};
use crate::scene_io::{
    decode_plucker, encode_mask_png, encode_plucker, encode_rgb_png, expand_pattern, load_cameras,
    read_file, read_mask_png, read_rgb_png, sequence_paths, sha256_file, sha256_hex,
    write_file,
};

/// A reconstructed video: frames, depth, cameras and static masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconInput {
    pub frames: Vec<RgbImage>,
    pub depths: Vec<DepthMap>,
    pub cams: CameraSequence,
    pub static_masks: Vec<Mask>,
}

impl ReconInput {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.depths.len() != n || self.static_masks.len() != n || self.cams.len() != n {
            return Err(Error::Shape(format!(
                "{n} frames, {} depth maps, {} masks, {} cameras",
                self.depths.len(),
                self.static_masks.len(),
                self.cams.len()
            )));
        }
        self.cams.validate()?;
        for i in 0..n {
            let k = &self.cams[i].intrinsics;
            self.frames[i].check_dims(k.width, k.height, &format!("frame {i}"))?;
            self.depths[i].check_dims(k.width, k.height, &format!("depth map {i}"))?;
            self.static_masks[i].check_dims(k.width, k.height, &format!("static mask {i}"))?;
        }
        Ok(())
    }

    /// Lifts every frame independently.
    pub fn lift(&self) -> Result<Vec<FramePointCloud>> {
        self.validate()?;
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                lift_frame(
                    &self.frames[i],
                    &self.depths[i],
                    &self.static_masks[i],
                    &self.cams[i],
                    i as u32,
                )
            })
            .collect()
    }

    pub fn persistent_cloud(&self) -> Result<PersistentCloud> {
        build_persistent(&self.lift()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    DoubleReprojection,
    Multiview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleProvenance {
    pub mode: BundleMode,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

/// Everything a conditioned generator consumes for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub source_frames: Vec<RgbImage>,
    pub source_alpha: Option<Vec<Mask>>,
    pub pc_render: Vec<RgbImage>,
    pub pc_alpha: Vec<Mask>,
    pub plucker: Vec<PluckerImage>,
    pub target_cams: CameraSequence,
    pub provenance: BundleProvenance,
}

impl ConditioningBundle {
    pub fn len(&self) -> usize {
        self.target_cams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_cams.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.target_cams.len();
        let lens = [
            ("source_frames", self.source_frames.len()),
            ("source_alpha", self.source_alpha.as_ref().map_or(n, Vec::len)),
            ("pc_render", self.pc_render.len()),
            ("pc_alpha", self.pc_alpha.len()),
            ("plucker", self.plucker.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Shape(format!("{name} has {len} frames, expected {n}")));
            }
        }
        for i in 0..n {
            let k = &self.target_cams[i].intrinsics;
            let (w, h) = (k.width, k.height);
            self.pc_render[i].check_dims(w, h, &format!("pc_render {i}"))?;
            self.pc_alpha[i].check_dims(w, h, &format!("pc_alpha {i}"))?;
            if (self.plucker[i].width, self.plucker[i].height) != (w, h) {
                return Err(Error::Shape(format!("plucker {i} does not match camera {i}")));
            }
            let (sw, sh) = self.source_frames[i].dims();
            if let Some(a) = &self.source_alpha {
                a[i].check_dims(sw, sh, &format!("source_alpha {i}"))?;
            }
        }
        Ok(())
    }
}

fn render_params(opts: &RenderOptions) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("point_radius".to_string(), Value::from(opts.point_radius)),
        ("near_clip".to_string(), Value::from(opts.near_clip)),
    ])
}

fn check_cam_count(cams: &CameraSequence, expected: usize, what: &str) -> Result<()> {
    if cams.len() != expected {
        return Err(Error::Shape(format!(
            "{} {what} cameras for {expected} frames",
            cams.len()
        )));
    }
    cams.validate()
}

/// Renders each target frame into its source camera, then lifts that render
/// from its own depth buffer and renders it back into the target camera.
/// Returns the first-pass renders and a bundle whose source video is the
/// first pass and whose point-cloud render is the second.
pub fn double_reproject(
    target: &ReconInput,
    source_cams: &CameraSequence,
    opts: &RenderOptions,
) -> Result<(Vec<RenderOutput>, ConditioningBundle)> {
    target.validate()?;
    check_cam_count(source_cams, target.len(), "source")?;
    opts.validate()?;
    let clouds = target.lift()?;

    let passes = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let first = render_frame(&[&clouds[i]], &source_cams[i], opts);
            let (w, h) = first.color.dims();
            let relifted = lift_frame(
                &first.color,
                &first.depth,
                &Grid::filled(w, h, false),
                &source_cams[i],
                i as u32,
            )?;
            let second = render_frame(&[&relifted], &target.cams[i], opts);
            Ok((first, second))
        })
        .collect::<Result<Vec<_>>>()?;

    let (first, second): (Vec<_>, Vec<_>) = passes.into_iter().unzip();
    let bundle = ConditioningBundle {
        source_frames: first.iter().map(|r| r.color.clone()).collect(),
        source_alpha: Some(first.iter().map(|r| r.alpha.clone()).collect()),
        pc_render: second.iter().map(|r| r.color.clone()).collect(),
        pc_alpha: second.into_iter().map(|r| r.alpha).collect(),
        plucker: plucker_sequence(&target.cams),
        target_cams: target.cams.clone(),
        provenance: BundleProvenance {
            mode: BundleMode::DoubleReprojection,
            params: render_params(opts),
        },
    };
    Ok((first, bundle))
}

/// Renders the source video's cloud into genuinely different target
/// cameras. With `persistence`, static points of every frame are visible in
/// every render; otherwise frame `i` sees only its own points.
pub fn multiview_condition(
    source: &ReconInput,
    target_cams: &CameraSequence,
    persistence: bool,
    opts: &RenderOptions,
) -> Result<ConditioningBundle> {
    source.validate()?;
    check_cam_count(target_cams, source.len(), "target")?;
    opts.validate()?;
    let clouds = source.lift()?;
    let renders = if persistence {
        render_video(&build_persistent(&clouds)?, target_cams, opts)?
    } else {
        clouds
            .par_iter()
            .zip(target_cams.cameras.par_iter())
            .map(|(c, cam)| render_frame(&[c], cam, opts))
            .collect()
    };
    let mut params = render_params(opts);
    params.insert("persistence".into(), Value::from(persistence));
    Ok(ConditioningBundle {
        source_frames: source.frames.clone(),
        source_alpha: None,
        pc_render: renders.iter().map(|r| r.color.clone()).collect(),
        pc_alpha: renders.into_iter().map(|r| r.alpha).collect(),
        plucker: plucker_sequence(target_cams),
        target_cams: target_cams.clone(),
        provenance: BundleProvenance {
            mode: BundleMode::Multiview,
            params,
        },
    })
}

pub fn plucker_sequence(cams: &CameraSequence) -> Vec<PluckerImage> {
    cams.cameras
        .par_iter()
        .map(|c| plucker_image(&c.intrinsics, &c.pose))
        .collect()
}

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFiles {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_alpha: Option<String>,
    pub pc_render: String,
    pub pc_alpha: String,
    pub plucker: String,
    pub cameras: String,
}

/// `bundle.json`. Checksums are SHA-256 hex digests keyed by path relative
/// to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub files: BundleFiles,
    pub checksums: BTreeMap<String, String>,
    pub provenance: BundleProvenance,
    pub created_unix: u64,
}

/// Writes the bundle under `dir` and returns the manifest path. Colors are
/// stored as 8-bit PNG, so round trips are exact for 8-bit inputs.
pub fn emit_bundle(bundle: &ConditioningBundle, dir: &Path) -> Result<PathBuf> {
    bundle.validate()?;
    let (width, height) = bundle
        .target_cams
        .get(0)
        .map_or((0, 0), |c| (c.intrinsics.width, c.intrinsics.height));
    let files = BundleFiles {
        source: "source/%05d.png".into(),
        source_alpha: bundle.source_alpha.as_ref().map(|_| "source_alpha/%05d.png".into()),
        pc_render: "pc_render/%05d.png".into(),
        pc_alpha: "pc_alpha/%05d.png".into(),
        plucker: "plucker/%05d.rpk".into(),
        cameras: "cameras.json".into(),
    };

    let mut outputs: Vec<(String, Vec<u8>)> = (0..bundle.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let name = |pat: &str| expand_pattern(pat, i).expect("fixed pattern");
            let mut v = vec![
                (name(&files.source), encode_rgb_png(&bundle.source_frames[i])),
                (name(&files.pc_render), encode_rgb_png(&bundle.pc_render[i])),
                (name(&files.pc_alpha), encode_mask_png(&bundle.pc_alpha[i])),
                (name(&files.plucker), encode_plucker(&bundle.plucker[i])),
            ];
            if let (Some(pat), Some(alpha)) = (&files.source_alpha, &bundle.source_alpha) {
                v.push((name(pat), encode_mask_png(&alpha[i])));
            }
            v
        })
        .collect();
    outputs.push((files.cameras.clone(), bundle.target_cams.to_json().into_bytes()));

    let mut checksums = BTreeMap::new();
    for (rel, bytes) in &outputs {
        write_file(&dir.join(rel), bytes)?;
        checksums.insert(rel.clone(), sha256_hex(bytes));
    }
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        frames: bundle.len(),
        width,
        height,
        files,
        checksums,
        provenance: bundle.provenance.clone(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let path = dir.join("bundle.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

pub fn load_bundle_manifest(path: &Path) -> Result<BundleManifest> {
    let bytes = read_file(path)?;
    let m: BundleManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if m.version != BUNDLE_VERSION {
        return Err(Error::format(path, format!("unsupported bundle version {}", m.version)));
    }
    Ok(m)
}

/// Verifies every checksum in the manifest and every sequence count, then
/// loads the bundle.
pub fn load_bundle(manifest_path: &Path) -> Result<ConditioningBundle> {
    let m = load_bundle_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    m.checksums
        .par_iter()
        .map(|(rel, expected)| {
            let path = base.join(rel);
            let found = sha256_file(&path)?;
            if &found != expected {
                return Err(Error::Integrity {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
            Ok(())
        })
        .collect::<Result<()>>()?;

    let listed = |paths: Vec<PathBuf>| -> Result<Vec<PathBuf>> {
        for p in &paths {
            let rel = p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/");
            if !m.checksums.contains_key(&rel) {
                return Err(Error::format(p, "file has no checksum in the bundle manifest"));
            }
        }
        Ok(paths)
    };
    let seq = |pattern: &str, name: &str| listed(sequence_paths(base, pattern, name, m.frames)?);

    let source = seq(&m.files.source, "source")?;
    let pc_render = seq(&m.files.pc_render, "pc_render")?;
    let pc_alpha = seq(&m.files.pc_alpha, "pc_alpha")?;
    let plucker = seq(&m.files.plucker, "plucker")?;
    let source_alpha = m
        .files
        .source_alpha
        .as_deref()
        .map(|p| seq(p, "source_alpha"))
        .transpose()?;
    let cams_path = listed(vec![base.join(&m.files.cameras)])?.remove(0);

    let rgb = |paths: &[PathBuf]| paths.par_iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>();
    let masks =
        |paths: &[PathBuf]| paths.par_iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>();
    let bundle = ConditioningBundle {
        source_frames: rgb(&source)?,
        source_alpha: source_alpha.as_deref().map(masks).transpose()?,
        pc_render: rgb(&pc_render)?,
        pc_alpha: masks(&pc_alpha)?,
        plucker: plucker
            .par_iter()
            .map(|p| decode_plucker(p, &read_file(p)?))
            .collect::<Result<Vec<_>>>()?,
        target_cams: load_cameras(&cams_path)?,
        provenance: m.provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}
