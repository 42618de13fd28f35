//! Ray-cast synthetic scenes with exact depth: a checkered room, an optional
//! moving sphere that is marked dynamic, and optional axis-aligned
//! rectangles facing the z axis.
//!
//! Rays pass through integer pixel coordinates, matching the lifting
//! convention, and depth is the camera-space z of the first hit. All colors
//! sit on 8-bit levels so PNG round trips are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::ReconInput;
use crate::error::Result;
use crate::geometry::{axis_angle, Camera, CameraIntrinsics, CameraPose, CameraSequence, Vec3};
use crate::image::{from_u8, DepthMap, Grid, Mask, Rgb, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub start: Vec3,
    /// World displacement per frame.
    pub velocity: Vec3,
    pub radius: f64,
}

/// Rectangle in the plane `z = z`, spanning `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub z: f64,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub color: [u8; 3],
    pub dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Half extent of the axis-aligned room cube centered at the origin.
    /// Zero removes the room.
    pub room_half: f64,
    pub cell: f64,
    pub blob: Option<Blob>,
    pub rects: Vec<Rect>,
    pub palette_seed: u64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            room_half: 4.0,
            cell: 0.5,
            blob: Some(Blob {
                start: Vec3::new(-0.8, 0.3, 2.5),
                velocity: Vec3::new(0.1, 0.0, 0.0),
                radius: 0.5,
            }),
            rects: Vec::new(),
            palette_seed: 0,
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn palette(seed: u64, key: [i64; 3]) -> Rgb {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for k in key {
        h = mix(h ^ k as u64);
    }
    [0, 8, 16].map(|s| from_u8(32 + ((h >> s) as u8 % 192)))
}

struct Hit {
    t: f64,
    color: Rgb,
    dynamic: bool,
}

impl SyntheticScene {
    /// Two fronto-parallel planes and no room, for occlusion checks.
    pub fn two_planes() -> Self {
        Self {
            room_half: 0.0,
            cell: 0.5,
            blob: None,
            rects: vec![
                Rect {
                    z: 2.0,
                    x0: -0.4,
                    x1: 0.4,
                    y0: -0.4,
                    y1: 0.4,
                    color: [220, 40, 40],
                    dynamic: false,
                },
                Rect {
                    z: 4.0,
                    x0: -3.0,
                    x1: 3.0,
                    y0: -3.0,
                    y1: 3.0,
                    color: [40, 60, 200],
                    dynamic: false,
                },
            ],
            palette_seed: 0,
        }
    }

    fn cast(&self, o: &Vec3, d: &Vec3, frame: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut offer = |h: Hit| {
            if h.t > 0.0 && best.as_ref().is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };

        if self.room_half > 0.0 {
            let mut exit = f64::INFINITY;
            let mut axis = 0;
            for a in 0..3 {
                if d[a] != 0.0 {
                    let wall = self.room_half.copysign(d[a]);
                    let t = (wall - o[a]) / d[a];
                    if t > 0.0 && t < exit {
                        exit = t;
                        axis = a;
                    }
                }
            }
            if exit.is_finite() {
                let p = o + d * exit;
                let side = if d[axis] > 0.0 { 1 } else { 0 };
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                let key = [
                    (axis * 2 + side) as i64,
                    (p[a] / self.cell).floor() as i64,
                    (p[b] / self.cell).floor() as i64,
                ];
                offer(Hit {
                    t: exit,
                    color: palette(self.palette_seed, key),
                    dynamic: false,
                });
            }
        }

        for r in &self.rects {
            if d.z == 0.0 {
                continue;
            }
            let t = (r.z - o.z) / d.z;
            let p = o + d * t;
            if p.x >= r.x0 && p.x <= r.x1 && p.y >= r.y0 && p.y <= r.y1 {
                offer(Hit {
                    t,
                    color: r.color.map(from_u8),
                    dynamic: r.dynamic,
                });
            }
        }

        if let Some(b) = &self.blob {
            let c = b.start + b.velocity * frame as f64;
            let oc = o - c;
            let a = d.norm_squared();
            let half_b = oc.dot(d);
            let disc = half_b * half_b - a * (oc.norm_squared() - b.radius * b.radius);
            if disc >= 0.0 {
                let t = (-half_b - disc.sqrt()) / a;
                let p = o + d * t;
                let q = (p - c) / (b.radius * 0.5);
                let key = [
                    100,
                    q.x.floor() as i64 + 7 * q.z.floor() as i64,
                    q.y.floor() as i64,
                ];
                offer(Hit {
                    t,
                    color: palette(self.palette_seed ^ 0xb10b, key),
                    dynamic: true,
                });
            }
        }
        best
    }

    /// Color, exact depth and static mask of `frame` seen from `camera`.
    /// Pixels whose ray hits nothing get depth `+inf`, black, and static.
    pub fn render(&self, camera: &Camera, frame: usize) -> (RgbImage, DepthMap, Mask) {
        let k = &camera.intrinsics;
        let (w, h) = (k.width, k.height);
        let mut color = Grid::filled(w, h, [0.0; 3]);
        let mut depth = Grid::filled(w, h, f64::INFINITY);
        let mut mask = Grid::filled(w, h, true);
        for v in 0..h {
            for u in 0..w {
                let d_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let d = camera.pose.rotation * d_cam;
                if let Some(hit) = self.cast(&camera.pose.center, &d, frame) {
                    let i = color.index(u, v);
                    color.data[i] = hit.color;
                    depth.data[i] = hit.t;
                    mask.data[i] = !hit.dynamic;
                }
            }
        }
        (color, depth, mask)
    }

    pub fn video(&self, cams: &CameraSequence) -> Result<ReconInput> {
        cams.validate()?;
        let mut frames = Vec::with_capacity(cams.len());
        let mut depths = Vec::with_capacity(cams.len());
        let mut static_masks = Vec::with_capacity(cams.len());
        for (i, cam) in cams.iter().enumerate() {
            let (c, d, m) = self.render(cam, i);
            frames.push(c);
            depths.push(d);
            static_masks.push(m);
        }
        Ok(ReconInput {
            frames,
            depths,
            cams: cams.clone(),
            static_masks,
        })
    }
}

/// `n` cameras at the origin looking down +z, panning about the vertical
/// axis through `pan_deg` in total and translating by `shift` overall.
pub fn pan_cameras(
    n: usize,
    width: u32,
    height: u32,
    fov_v_deg: f64,
    pan_deg: f64,
    shift: Vec3,
) -> Result<CameraSequence> {
    let k = CameraIntrinsics::from_fov(fov_v_deg, width, height)?;
    let cameras = (0..n)
        .map(|i| {
            let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let rotation = axis_angle(&Vec3::y(), (pan_deg * (s - 0.5)).to_radians());
            Camera::new(k, CameraPose { rotation, center: shift * (s - 0.5) })
        })
        .collect();
    CameraSequence::new(cameras)
}

/// Multiplies every finite depth by an independent factor in `[1 - rel, 1 + rel]`.
pub fn perturb_depths(depths: &[DepthMap], rel: f64, seed: u64) -> Vec<DepthMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    depths
        .iter()
        .map(|d| {
            d.map(|&z| {
                let f = 1.0 + rng.random_range(-rel..=rel);
                if z.is_finite() {
                    z * f
                } else {
                    z
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_is_camera_z() {
        let scene = SyntheticScene {
            blob: None,
            ..SyntheticScene::two_planes()
        };
        let cams = pan_cameras(1, 32, 24, 60.0, 0.0, Vec3::zeros()).unwrap();
        let (_, d, m) = scene.render(&cams[0], 0);
        let k = &cams[0].intrinsics;
        let center = d.get(k.cx as u32, k.cy as u32);
        assert_eq!(*center, 2.0);
        // Outside the red square (half width 0.4 at z = 2) but inside the back plane.
        assert_eq!(*d.get(k.cx as u32 + 8, k.cy as u32), 4.0);
        assert_eq!(*d.get(0, 0), f64::INFINITY);
        assert!(m.data.iter().all(|&s| s));
    }

    #[test]
    fn blob_is_dynamic_and_colors_are_quantized() {
        let cams = pan_cameras(2, 40, 30, 60.0, 10.0, Vec3::zeros()).unwrap();
        let input = SyntheticScene::default().video(&cams).unwrap();
        assert!(input.static_masks[0].data.iter().any(|&s| !s));
        assert!(input.depths[0].data.iter().all(|d| d.is_finite() && *d > 0.0));
        for img in &input.frames {
            assert_eq!(&crate::image::quantize(img), img);
        }
    }
}
