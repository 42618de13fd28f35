//! Reference oracles and generators shared by the integration tests and the
//! acceptance run. Oracles are deliberately naive.

#![allow(dead_code)]

use nalgebra::{Matrix3, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reshoot_core::geometry::{axis_angle, project, Mat3, Vec3};
use reshoot_core::{
    Camera, CameraIntrinsics, CameraPose, FramePointCloud, Provenance, Rgb, SimilarityTransform,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(r: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_rotation(r: &mut impl Rng) -> Mat3 {
    axis_angle(&random_unit(r), r.random_range(0.0..std::f64::consts::PI))
}

pub fn random_intrinsics(r: &mut impl Rng, max_side: u32) -> CameraIntrinsics {
    let w = r.random_range(1..=max_side);
    let h = r.random_range(1..=max_side);
    let f = r.random_range(0.5..2.0) * w.max(h) as f64;
    CameraIntrinsics::new(
        f,
        f * r.random_range(0.8..1.25),
        w as f64 * r.random_range(0.3..0.7),
        h as f64 * r.random_range(0.3..0.7),
        w,
        h,
    )
    .unwrap()
}

pub fn random_camera(r: &mut impl Rng, max_side: u32) -> Camera {
    Camera::new(
        random_intrinsics(r, max_side),
        CameraPose {
            rotation: random_rotation(r),
            center: Vec3::new(
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
            ),
        },
    )
}

pub fn random_similarity(r: &mut impl Rng) -> SimilarityTransform {
    SimilarityTransform::new(
        10f64.powf(r.random_range(-1.0..1.0)),
        random_rotation(r),
        Vec3::new(
            r.random_range(-10.0..10.0),
            r.random_range(-10.0..10.0),
            r.random_range(-10.0..10.0),
        ),
    )
    .unwrap()
}

/// Random points mostly in front of `cam`, with 8-bit colors. Some points
/// are duplicated at equal depth to exercise tie breaking.
pub fn random_points_for(r: &mut impl Rng, cam: &Camera, n: usize) -> FramePointCloud {
    let k = &cam.intrinsics;
    let mut pc = FramePointCloud::with_capacity(n);
    while pc.len() < n {
        let color: Rgb = [0, 1, 2].map(|_| r.random_range(0..=255u8) as f32 / 255.0);
        let prov = Provenance {
            source: 0,
            frame: 0,
            u: 0,
            v: 0,
        };
        if pc.len() > 0 && r.random_bool(0.1) {
            let j = r.random_range(0..pc.len());
            let p = pc.positions[j];
            pc.push(p, color, true, prov);
            continue;
        }
        let u = r.random_range(-3.0..k.width as f64 + 3.0);
        let v = r.random_range(-3.0..k.height as f64 + 3.0);
        let z = if r.random_bool(0.05) {
            r.random_range(-1.0..0.01)
        } else {
            r.random_range(0.05..10.0)
        };
        let cam_p = Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        pc.push(cam.pose.cam_to_world(&cam_p), color, r.random_bool(0.7), prov);
    }
    pc
}

/// Pixels × points reference renderer. For every pixel, scans every point
/// in canonical order and keeps the first one with the smallest depth among
/// those whose footprint covers the pixel. Projection is done once per
/// point up front; the visibility search itself is exhaustive.
pub fn brute_render(
    layers: &[&FramePointCloud],
    cam: &Camera,
    radius: u32,
    near: f64,
    background: Rgb,
) -> (Vec<Rgb>, Vec<bool>, Vec<f64>) {
    let k = &cam.intrinsics;
    let projected: Vec<(i64, i64, f64, Rgb)> = layers
        .iter()
        .flat_map(|l| l.positions.iter().zip(l.colors.iter()))
        .filter_map(|(p, c)| {
            let q = cam.pose.world_to_cam(p);
            if q.z <= near || q.z.is_nan() {
                return None;
            }
            let ((u, v), z) = project(&q, k).unwrap();
            let (cu, cv) = ((u + 0.5).floor(), (v + 0.5).floor());
            if cu < 0.0 || cv < 0.0 || cu >= k.width as f64 || cv >= k.height as f64 {
                return None;
            }
            Some((cu as i64, cv as i64, z, *c))
        })
        .collect();
    let r = radius as i64;
    let n = (k.width * k.height) as usize;
    let (mut color, mut alpha, mut depth) = (vec![background; n], vec![false; n], vec![f64::INFINITY; n]);
    for y in 0..k.height as i64 {
        for x in 0..k.width as i64 {
            let i = (y * k.width as i64 + x) as usize;
            for &(cu, cv, z, c) in &projected {
                if (x - cu).abs() > r || (y - cv).abs() > r {
                    continue;
                }
                if !alpha[i] || z < depth[i] {
                    alpha[i] = true;
                    depth[i] = z;
                    color[i] = c;
                }
            }
        }
    }
    (color, alpha, depth)
}

pub fn residual(s: &SimilarityTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(a, b)| (s.apply(a) - b).norm_squared())
        .sum()
}

/// Least-squares similarity found by trying every diagonal sign correction
/// of the cross-covariance SVD and keeping the proper rotation with the
/// lowest residual.
pub fn best_proper_similarity(src: &[Vec3], dst: &[Vec3]) -> (SimilarityTransform, f64) {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        cov += (b - md) * (a - ms).transpose();
        var += (a - ms).norm_squared();
    }
    let svd = SVD::new(cov / n, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut best: Option<(SimilarityTransform, f64)> = None;
    for signs in 0..8u32 {
        let s = Matrix3::from_diagonal(&Vec3::from_fn(|i, _| {
            if signs & (1 << i) != 0 {
                -1.0
            } else {
                1.0
            }
        }));
        let rot = u * s * vt;
        if rot.determinant() < 0.0 {
            continue;
        }
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
        let scale = trace / (var / n);
        if scale <= 0.0 {
            continue;
        }
        let t = md - scale * rot * ms;
        let cand = SimilarityTransform::new(scale, rot, t).unwrap();
        let res = residual(&cand, src, dst);
        if best.as_ref().is_none_or(|b| res < b.1) {
            best = Some((cand, res));
        }
    }
    best.expect("some proper candidate")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Ground truth and corrupted chunks for the long-video memory pipeline.
pub struct MemoryScenario {
    pub truth: reshoot_core::ReconInput,
    pub initial: reshoot_core::ReconInput,
    pub chunks: Vec<reshoot_core::ChunkReconstruction>,
    pub corruption: Vec<SimilarityTransform>,
    /// Static points with valid depth, summed over every frame.
    pub expected_static: usize,
}

/// A wobbling camera path through the synthetic room.
pub fn wobble_cameras(n: usize, w: u32, h: u32) -> reshoot_core::CameraSequence {
    let k = CameraIntrinsics::from_fov(60.0, w, h).unwrap();
    reshoot_core::CameraSequence::new(
        (0..n)
            .map(|i| {
                let t = i as f64;
                Camera::new(
                    k,
                    CameraPose {
                        rotation: axis_angle(&Vec3::y(), 0.3 * (t * 0.17).sin())
                            * axis_angle(&Vec3::x(), 0.1 * (t * 0.23).cos()),
                        center: Vec3::new(
                            0.8 * (t * 0.21).sin(),
                            0.3 * (t * 0.37).cos(),
                            -1.0 + 0.03 * t,
                        ),
                    },
                )
            })
            .collect(),
    )
    .unwrap()
}

pub fn memory_scenario(
    initial_frames: usize,
    chunk_frames: usize,
    chunks: usize,
    anchors: usize,
    seed: u64,
    size: (u32, u32),
) -> MemoryScenario {
    use reshoot_core::memory::subsample_anchors;
    use reshoot_core::synthetic::SyntheticScene;

    let total = initial_frames + chunk_frames * chunks;
    let truth = SyntheticScene::default()
        .video(&wobble_cameras(total, size.0, size.1))
        .unwrap();
    let sub = |range: std::ops::Range<usize>| reshoot_core::ReconInput {
        frames: truth.frames[range.clone()].to_vec(),
        depths: truth.depths[range.clone()].to_vec(),
        cams: reshoot_core::CameraSequence::new(truth.cams.cameras[range.clone()].to_vec()).unwrap(),
        static_masks: truth.static_masks[range].to_vec(),
    };
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut corruption = Vec::new();
    for c in 0..chunks {
        let existing = initial_frames + c * chunk_frames;
        let anchor_ids = subsample_anchors(existing, anchors);
        let ids: Vec<usize> = anchor_ids
            .iter()
            .cloned()
            .chain(existing..existing + chunk_frames)
            .collect();
        let s = random_similarity(&mut r);
        let chunk = reshoot_core::ChunkReconstruction {
            frames: ids.iter().map(|&i| truth.frames[i].clone()).collect(),
            depths: ids
                .iter()
                .map(|&i| truth.depths[i].map(|d| d * s.scale))
                .collect(),
            local_cams: reshoot_core::CameraSequence::new(
                ids.iter()
                    .map(|&i| Camera::new(truth.cams[i].intrinsics, s.apply_pose(&truth.cams[i].pose)))
                    .collect(),
            )
            .unwrap(),
            static_masks: ids.iter().map(|&i| truth.static_masks[i].clone()).collect(),
            anchor_map: anchor_ids.iter().enumerate().map(|(j, &g)| (j, g)).collect(),
        };
        out.push(chunk);
        corruption.push(s);
    }
    let expected_static = (0..total)
        .map(|i| {
            truth.depths[i]
                .data
                .iter()
                .zip(&truth.static_masks[i].data)
                .filter(|(d, s)| d.is_finite() && **s)
                .count()
        })
        .sum();
    MemoryScenario {
        initial: sub(0..initial_frames),
        truth,
        chunks: out,
        corruption,
        expected_static,
    }
}
