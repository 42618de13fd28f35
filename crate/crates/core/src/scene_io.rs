//! On-disk formats: PNG sequences, float depth binaries, camera JSON, the
//! `scene.json` manifest and binary PLY point clouds.
//!
//! Depth binaries are little-endian: magic `RFD1`, `u32` width, `u32`
//! height, then row-major `f32` samples. Render depth dumps use magic `RFD2`
//! with an extra `u32` frame index after the height.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::ReconInput;
use crate::error::{Error, Result};
use crate::geometry::{CameraSequence, PluckerImage, Vec3};
use crate::image::{from_u8, to_u8, DepthMap, Grid, Mask, RgbImage};
use crate::pointcloud::{FramePointCloud, PersistentCloud, Provenance};

pub const DEPTH_MAGIC: &[u8; 4] = b"RFD1";
pub const RENDER_DEPTH_MAGIC: &[u8; 4] = b"RFD2";
pub const PLUCKER_MAGIC: &[u8; 4] = b"RPK1";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

// ---------------------------------------------------------------- PNG

fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().expect("png header into memory");
        writer.write_image_data(data).expect("png data into memory");
    }
    out
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let data: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    encode_png(img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// One bit per pixel grayscale; set pixels are white.
pub fn encode_mask_png(mask: &Mask) -> Vec<u8> {
    let stride = (mask.width as usize).div_ceil(8);
    let mut data = vec![0u8; stride * mask.height as usize];
    for v in 0..mask.height as usize {
        for u in 0..mask.width as usize {
            if mask.data[v * mask.width as usize + u] {
                data[v * stride + u / 8] |= 0x80 >> (u % 8);
            }
        }
    }
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One, &data)
}

pub fn encode_depth_png16(depth: &DepthMap, scale: f64) -> Vec<u8> {
    let data: Vec<u8> = depth
        .data
        .iter()
        .flat_map(|&d| {
            let raw = if d.is_finite() && d > 0.0 {
                (d / scale).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            raw.to_be_bytes()
        })
        .collect();
    encode_png(depth.width, depth.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

struct DecodedPng {
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path, transform: png::Transformations) -> Result<DecodedPng> {
    let bytes = read_file(path)?;
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(transform);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("invalid PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "PNG too large"))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::format(path, format!("invalid PNG: {e}")))?;
    data.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width,
        height: info.height,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// 8-bit RGB(A) or grayscale PNG to linear `[0, 1]` RGB.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let png = decode_png(path, png::Transformations::EXPAND)?;
    if png.depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit color PNG"));
    }
    let channels = match png.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => unreachable!("palette expanded by decoder"),
    };
    let data = png
        .data
        .chunks_exact(channels)
        .map(|px| {
            if channels < 3 {
                [from_u8(px[0]); 3]
            } else {
                [from_u8(px[0]), from_u8(px[1]), from_u8(px[2])]
            }
        })
        .collect();
    Grid::from_vec(png.width, png.height, data)
}

/// 1-bit or 8-bit grayscale mask, thresholded at 128.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let png = decode_png(path, png::Transformations::EXPAND | png::Transformations::STRIP_16)?;
    let channels = match png.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => unreachable!("palette expanded by decoder"),
    };
    let data = png.data.chunks_exact(channels).map(|px| px[0] >= 128).collect();
    Grid::from_vec(png.width, png.height, data)
}

/// 16-bit grayscale depth PNG; sample value times `scale` gives depth. Zero
/// means missing and reads as `+inf`.
pub fn read_depth_png16(path: &Path, scale: f64) -> Result<DepthMap> {
    let png = decode_png(path, png::Transformations::IDENTITY)?;
    if png.color != png::ColorType::Grayscale || png.depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "expected a 16-bit grayscale depth PNG"));
    }
    let data = png
        .data
        .chunks_exact(2)
        .map(|b| {
            let raw = u16::from_be_bytes([b[0], b[1]]);
            if raw == 0 {
                f64::INFINITY
            } else {
                raw as f64 * scale
            }
        })
        .collect();
    Grid::from_vec(png.width, png.height, data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_rgb_png(img))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_file(path, &encode_mask_png(mask))
}

// ------------------------------------------------------- float binaries

pub fn encode_depth_bin(depth: &DepthMap, frame: Option<u32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + depth.len() * 4);
    out.extend_from_slice(if frame.is_some() {
        RENDER_DEPTH_MAGIC
    } else {
        DEPTH_MAGIC
    });
    out.extend_from_slice(&depth.width.to_le_bytes());
    out.extend_from_slice(&depth.height.to_le_bytes());
    if let Some(f) = frame {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for &d in &depth.data {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads an `RFD1` or `RFD2` depth binary; returns the frame index for `RFD2`.
pub fn read_depth_bin(path: &Path) -> Result<(DepthMap, Option<u32>)> {
    let bytes = read_file(path)?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "depth file shorter than its header"));
    }
    let (header, frame) = match &bytes[..4] {
        m if m == DEPTH_MAGIC => (12, None),
        m if m == RENDER_DEPTH_MAGIC && bytes.len() >= 16 => (16, Some(le_u32(&bytes, 12))),
        _ => return Err(Error::format(path, "bad depth magic (expected RFD1 or RFD2)")),
    };
    let (w, h) = (le_u32(&bytes, 4), le_u32(&bytes, 8));
    let expected = header + w as usize * h as usize * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{w}x{h} depth needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Grid::from_vec(w, h, data)?, frame))
}

pub fn encode_plucker(img: &PluckerImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 24);
    out.extend_from_slice(PLUCKER_MAGIC);
    out.extend_from_slice(&img.width.to_le_bytes());
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&6u32.to_le_bytes());
    for px in &img.data {
        for c in px {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn decode_plucker(path: &Path, bytes: &[u8]) -> Result<PluckerImage> {
    if bytes.len() < 16 || &bytes[..4] != PLUCKER_MAGIC || le_u32(bytes, 12) != 6 {
        return Err(Error::format(path, "not a 6-channel RPK1 Plücker file"));
    }
    let (w, h) = (le_u32(bytes, 4), le_u32(bytes, 8));
    if bytes.len() != 16 + w as usize * h as usize * 24 {
        return Err(Error::format(path, "Plücker file size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(24)
        .map(|px| {
            let mut out = [0f32; 6];
            for (c, b) in out.iter_mut().zip(px.chunks_exact(4)) {
                *c = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            out
        })
        .collect();
    Ok(PluckerImage {
        width: w,
        height: h,
        data,
    })
}

// ------------------------------------------------------------ cameras

pub fn save_cameras(path: &Path, cams: &CameraSequence) -> Result<()> {
    write_file(path, cams.to_json().as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<CameraSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CameraSequence::from_json(&text).map_err(|m| Error::format(path, m))
}

// ------------------------------------------------------- scene manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    /// `RFD1` float binary.
    #[default]
    Rfd,
    /// 16-bit grayscale PNG times `depth_scale`.
    Png16,
}

/// `scene.json`. Sequence paths are printf-style patterns with one `%0Nd`
/// placeholder for the zero-based frame index, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub frames: usize,
    pub rgb: String,
    pub depth: String,
    #[serde(default)]
    pub depth_format: DepthFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
    pub static_mask: String,
    pub cameras: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

pub const SCENE_VERSION: u32 = 1;

impl SceneManifest {
    pub fn standard(frames: usize, depth_format: DepthFormat) -> Self {
        let (depth, depth_scale) = match depth_format {
            DepthFormat::Rfd => ("depth/%05d.rfd".to_string(), None),
            DepthFormat::Png16 => ("depth/%05d.png".to_string(), Some(0.001)),
        };
        SceneManifest {
            version: SCENE_VERSION,
            frames,
            rgb: "rgb/%05d.png".into(),
            depth,
            depth_format,
            depth_scale,
            static_mask: "mask/%05d.png".into(),
            cameras: "cameras.json".into(),
            units: None,
        }
    }
}

/// Substitutes `index` into the single `%0Nd` / `%d` placeholder of `pattern`.
pub fn expand_pattern(pattern: &str, index: usize) -> std::result::Result<String, String> {
    let start = pattern
        .find('%')
        .ok_or_else(|| format!("pattern {pattern:?} has no %d placeholder"))?;
    let rest = &pattern[start + 1..];
    let end = rest
        .find('d')
        .ok_or_else(|| format!("pattern {pattern:?} has a malformed placeholder"))?;
    let spec = &rest[..end];
    let width = if spec.is_empty() {
        0
    } else if let Some(w) = spec.strip_prefix('0') {
        w.parse::<usize>()
            .map_err(|_| format!("pattern {pattern:?} has a malformed placeholder"))?
    } else {
        return Err(format!("pattern {pattern:?} has a malformed placeholder"));
    };
    if rest[end + 1..].contains('%') {
        return Err(format!("pattern {pattern:?} has more than one placeholder"));
    }
    Ok(format!(
        "{}{:0width$}{}",
        &pattern[..start],
        index,
        &rest[end + 1..]
    ))
}

pub(crate) fn sequence_paths(base: &Path, pattern: &str, name: &str, frames: usize) -> Result<Vec<PathBuf>> {
    let path_of = |i: usize| {
        expand_pattern(pattern, i)
            .map(|p| base.join(p))
            .map_err(|m| Error::Config(format!("{name} sequence: {m}")))
    };
    let mut found = 0;
    while path_of(found)?.is_file() {
        found += 1;
    }
    if found != frames {
        return Err(Error::CountMismatch {
            sequence: name.to_string(),
            expected: frames,
            found,
        });
    }
    (0..frames).map(path_of).collect()
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if m.version != SCENE_VERSION {
        return Err(Error::format(path, format!("unsupported scene version {}", m.version)));
    }
    if m.depth_format == DepthFormat::Png16 && !m.depth_scale.is_some_and(|s| s > 0.0) {
        return Err(Error::format(path, "png16 depth needs a positive depth_scale"));
    }
    Ok(m)
}

/// Loads and validates a scene: counts and dimensions of every sequence
/// must agree with the manifest and the cameras.
pub fn load_scene(manifest_path: &Path) -> Result<ReconInput> {
    let m = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let rgb = sequence_paths(base, &m.rgb, "rgb", m.frames)?;
    let depth = sequence_paths(base, &m.depth, "depth", m.frames)?;
    let mask = sequence_paths(base, &m.static_mask, "static_mask", m.frames)?;
    let cams_path = base.join(&m.cameras);
    let cams = load_cameras(&cams_path)?;
    if cams.len() != m.frames {
        return Err(Error::CountMismatch {
            sequence: "cameras".into(),
            expected: m.frames,
            found: cams.len(),
        });
    }

    let frames = rgb
        .par_iter()
        .map(|p| read_rgb_png(p))
        .collect::<Result<Vec<_>>>()?;
    let depths = depth
        .par_iter()
        .map(|p| match m.depth_format {
            DepthFormat::Rfd => read_depth_bin(p).map(|(d, _)| d),
            DepthFormat::Png16 => read_depth_png16(p, m.depth_scale.unwrap_or(1.0)),
        })
        .collect::<Result<Vec<_>>>()?;
    let static_masks = mask
        .par_iter()
        .map(|p| read_mask_png(p))
        .collect::<Result<Vec<_>>>()?;

    for i in 0..m.frames {
        let k = &cams[i].intrinsics;
        let check = |dims: (u32, u32), p: &Path| {
            if dims != (k.width, k.height) {
                Err(Error::format(
                    p,
                    format!(
                        "image is {}x{}, camera {i} expects {}x{}",
                        dims.0, dims.1, k.width, k.height
                    ),
                ))
            } else {
                Ok(())
            }
        };
        check(frames[i].dims(), &rgb[i])?;
        check(depths[i].dims(), &depth[i])?;
        check(static_masks[i].dims(), &mask[i])?;
    }
    let input = ReconInput {
        frames,
        depths,
        cams,
        static_masks,
    };
    input.validate()?;
    Ok(input)
}

/// Writes a scene directory with the standard layout and returns the
/// manifest path.
pub fn save_scene(dir: &Path, scene: &ReconInput, depth_format: DepthFormat) -> Result<PathBuf> {
    scene.validate()?;
    let m = SceneManifest::standard(scene.frames.len(), depth_format);
    let files: Vec<(PathBuf, Vec<u8>)> = (0..scene.frames.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = |pat: &str| dir.join(expand_pattern(pat, i).expect("standard pattern"));
            let depth = match depth_format {
                DepthFormat::Rfd => encode_depth_bin(&scene.depths[i], None),
                DepthFormat::Png16 => {
                    encode_depth_png16(&scene.depths[i], m.depth_scale.unwrap_or(1.0))
                }
            };
            [
                (p(&m.rgb), encode_rgb_png(&scene.frames[i])),
                (p(&m.depth), depth),
                (p(&m.static_mask), encode_mask_png(&scene.static_masks[i])),
            ]
        })
        .collect();
    for (path, bytes) in &files {
        write_file(path, bytes)?;
    }
    save_cameras(&dir.join(&m.cameras), &scene.cams)?;
    let manifest_path = dir.join("scene.json");
    write_file(
        &manifest_path,
        serde_json::to_string_pretty(&m).expect("manifest serializes").as_bytes(),
    )?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
    BinaryBe,
}

struct PlyHeader {
    format: PlyFormat,
    elements: Vec<Element>,
    comments: Vec<String>,
    body_offset: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |i| start + i);
        *pos = (end + 1).min(bytes.len() + 1);
        let line = String::from_utf8_lossy(&bytes[start..end])
            .trim_end_matches('\r')
            .to_string();
        Some((start, line))
    };

    match next_line(&mut pos) {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(err(0, "missing 'ply' magic line".into())),
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    loop {
        let Some((at, line)) = next_line(&mut pos) else {
            return Err(err(bytes.len(), "header ends without 'end_header'".into()));
        };
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    "binary_big_endian" => PlyFormat::BinaryBe,
                    other => return Err(err(at, format!("unknown PLY format {other:?}"))),
                })
            }
            ["comment", ..] => comments.push(line["comment".len()..].trim().to_string()),
            ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| err(at, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", c, i, name] => {
                let (Some(count), Some(item)) = (Scalar::parse(c), Scalar::parse(i)) else {
                    return Err(err(at, format!("unknown list property types in {line:?}")));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(at, "property before any element".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::List { count, item },
                });
            }
            ["property", t, name] => {
                let t = Scalar::parse(t)
                    .ok_or_else(|| err(at, format!("unknown property type {t:?}")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(at, "property before any element".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::Scalar(t),
                });
            }
            [] => {}
            _ => return Err(err(at, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| err(0, "header has no format line".into()))?;
    Ok(PlyHeader {
        format,
        elements,
        comments,
        body_offset: pos.min(bytes.len()),
    })
}

struct BodyReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    format: PlyFormat,
}

impl BodyReader<'_> {
    fn truncated(&self) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: "unexpected end of data".into(),
        }
    }

    fn ascii_token(&mut self) -> Result<&str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.truncated());
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse {
            path: self.path.to_path_buf(),
            offset: start as u64,
            message: "non-UTF-8 ASCII value".into(),
        })
    }

    fn read(&mut self, t: Scalar) -> Result<f64> {
        if self.format == PlyFormat::Ascii {
            let (at, path) = (self.pos, self.path);
            let tok = self.ascii_token()?;
            return tok.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: at as u64,
                message: format!("bad number {tok:?}"),
            });
        }
        let n = t.size();
        if self.pos + n > self.bytes.len() {
            return Err(self.truncated());
        }
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(&self.bytes[self.pos..self.pos + n]);
        if self.format == PlyFormat::BinaryBe {
            buf[..n].reverse();
        }
        self.pos += n;
        Ok(match t {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }

    fn skip_element(&mut self, el: &Element) -> Result<()> {
        for _ in 0..el.count {
            for p in &el.props {
                match p.kind {
                    PropKind::Scalar(t) => {
                        self.read(t)?;
                    }
                    PropKind::List { count, item } => {
                        let n = self.read(count)? as usize;
                        for _ in 0..n {
                            self.read(item)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Points read from a PLY file plus notes about defaulted properties.
#[derive(Debug, Clone)]
pub struct LoadedPoints {
    pub points: FramePointCloud,
    pub frame_count: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedCloud {
    pub cloud: PersistentCloud,
    pub warnings: Vec<String>,
}

const PLY_FIELDS: [&str; 11] = [
    "x", "y", "z", "red", "green", "blue", "frame_index", "is_static", "u", "v", "source",
];

/// Reads the vertex element of an ASCII or binary PLY. Missing color
/// defaults to mid-gray; missing provenance defaults to static points of
/// frame 0 at pixel (0, 0), and each default is reported as a warning.
pub fn load_points(path: &Path) -> Result<LoadedPoints> {
    let bytes = read_file(path)?;
    let header = parse_ply_header(path, &bytes)?;
    let mut reader = BodyReader {
        path,
        bytes: &bytes,
        pos: header.body_offset,
        format: header.format,
    };
    let frame_count = header
        .comments
        .iter()
        .find_map(|c| c.strip_prefix("frame_count "))
        .and_then(|n| n.trim().parse().ok());

    for el in &header.elements {
        if el.name != "vertex" {
            reader.skip_element(el)?;
            continue;
        }
        let slot: Vec<Option<usize>> = el
            .props
            .iter()
            .map(|p| match p.kind {
                PropKind::Scalar(_) => PLY_FIELDS.iter().position(|f| *f == p.name),
                PropKind::List { .. } => None,
            })
            .collect();
        let has = |name: &str| el.props.iter().any(|p| p.name == name);
        for axis in ["x", "y", "z"] {
            if !has(axis) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!("vertex element has no '{axis}' property"),
                });
            }
        }
        let float_color = el
            .props
            .iter()
            .any(|p| p.name == "red" && matches!(p.kind, PropKind::Scalar(t) if t.is_float()));
        let mut warnings = Vec::new();
        if !has("red") {
            warnings.push("no color properties; points default to mid-gray".to_string());
        }
        if !has("is_static") {
            warnings.push("no is_static property; all points default to static".to_string());
        }
        if !has("frame_index") {
            warnings.push("no frame_index property; all points default to frame 0".to_string());
        }

        let mut points = FramePointCloud::with_capacity(el.count);
        let mut vals = [0.0f64; 11];
        for _ in 0..el.count {
            vals = [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0];
            if !float_color {
                vals[3..6].copy_from_slice(&[127.5; 3]);
            }
            for (p, s) in el.props.iter().zip(&slot) {
                match p.kind {
                    PropKind::Scalar(t) => {
                        let v = reader.read(t)?;
                        if let Some(i) = s {
                            vals[*i] = v;
                        }
                    }
                    PropKind::List { count, item } => {
                        let n = reader.read(count)? as usize;
                        for _ in 0..n {
                            reader.read(item)?;
                        }
                    }
                }
            }
            let color = if float_color {
                [vals[3] as f32, vals[4] as f32, vals[5] as f32]
            } else if has("red") {
                [vals[3], vals[4], vals[5]].map(|c| from_u8(c as u8))
            } else {
                [0.5; 3]
            };
            points.push(
                Vec3::new(vals[0], vals[1], vals[2]),
                color,
                vals[7] != 0.0,
                Provenance {
                    source: vals[10] as u16,
                    frame: vals[6] as u32,
                    u: vals[8] as u32,
                    v: vals[9] as u32,
                },
            );
        }
        let _ = vals;
        points.validate()?;
        return Ok(LoadedPoints {
            points,
            frame_count,
            warnings,
        });
    }
    Err(Error::Parse {
        path: path.to_path_buf(),
        offset: header.body_offset as u64,
        message: "file has no vertex element".into(),
    })
}

fn write_ply<'a>(
    path: &Path,
    layers: impl Iterator<Item = &'a FramePointCloud> + Clone,
    frame_count: Option<usize>,
) -> Result<()> {
    let total: usize = layers.clone().map(|l| l.len()).sum();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment reshoot point cloud\n");
    if let Some(n) = frame_count {
        header += &format!("comment frame_count {n}\n");
    }
    header += &format!("element vertex {total}\n");
    for (t, name) in [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
        ("ushort", "frame_index"),
        ("uchar", "is_static"),
        ("ushort", "u"),
        ("ushort", "v"),
        ("ushort", "source"),
    ] {
        header += &format!("property {t} {name}\n");
    }
    header += "end_header\n";

    let narrow = |value: u32, what: &str| -> Result<u16> {
        u16::try_from(value).map_err(|_| {
            Error::format(path, format!("{what} {value} does not fit the 16-bit PLY field"))
        })
    };
    let mut body = Vec::with_capacity(total * 25);
    for layer in layers {
        for p in layer.iter() {
            for c in p.position.iter() {
                body.extend_from_slice(&(*c as f32).to_le_bytes());
            }
            body.extend(p.color.map(to_u8));
            body.extend_from_slice(&narrow(p.provenance.frame, "frame index")?.to_le_bytes());
            body.push(p.is_static as u8);
            body.extend_from_slice(&narrow(p.provenance.u, "pixel u")?.to_le_bytes());
            body.extend_from_slice(&narrow(p.provenance.v, "pixel v")?.to_le_bytes());
            body.extend_from_slice(&p.provenance.source.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Binary PLY of a flat point list. Positions are stored as 32-bit floats.
pub fn save_points(path: &Path, points: &FramePointCloud) -> Result<()> {
    write_ply(path, std::iter::once(points), None)
}

/// Binary PLY of a persistent cloud: the static pool first, then each
/// frame's dynamic points, with the frame count in a header comment.
pub fn save_cloud(cloud: &PersistentCloud, path: &Path) -> Result<()> {
    write_ply(
        path,
        std::iter::once(&cloud.static_points).chain(cloud.dynamic_by_frame.iter()),
        Some(cloud.frame_count()),
    )
}

pub fn load_cloud_with_warnings(path: &Path) -> Result<LoadedCloud> {
    let loaded = load_points(path)?;
    let max_frame = loaded
        .points
        .iter()
        .filter(|p| !p.is_static)
        .map(|p| p.provenance.frame as usize + 1)
        .max()
        .unwrap_or(0);
    let frames = loaded
        .frame_count
        .unwrap_or_else(|| {
            loaded
                .points
                .provenance
                .iter()
                .map(|p| p.frame as usize + 1)
                .max()
                .unwrap_or(0)
        })
        .max(max_frame);
    let mut cloud = PersistentCloud::empty(frames);
    for p in loaded.points.iter() {
        let layer = if p.is_static {
            &mut cloud.static_points
        } else {
            &mut cloud.dynamic_by_frame[p.provenance.frame as usize]
        };
        layer.push(*p.position, *p.color, p.is_static, *p.provenance);
    }
    Ok(LoadedCloud {
        cloud,
        warnings: loaded.warnings,
    })
}

pub fn load_cloud(path: &Path) -> Result<PersistentCloud> {
    let loaded = load_cloud_with_warnings(path)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded.cloud)
}
