mod common;

use common::*;
use reshoot_core::geometry::{axis_angle, rotation_distance, Vec3};
use reshoot_core::trajectory::{gaussian_smooth, interpolate_track, CameraKeyframe};
use reshoot_core::{Camera, CameraIntrinsics, CameraPose, CameraSequence, KeyframeTrack};

fn base() -> CameraIntrinsics {
    CameraIntrinsics::from_fov(50.0, 672, 384).unwrap()
}

fn arc_track(radius: f64, sweep: f64) -> KeyframeTrack {
    let keyframes = (0..8)
        .map(|j| {
            let a = sweep * j as f64 / 7.0;
            let center = Vec3::new(radius * a.sin(), 0.0, -radius * a.cos());
            CameraKeyframe {
                frame_index: (j as f64 * 48.0 / 7.0).round() as usize,
                pose: CameraPose::look_at(center, Vec3::zeros(), Vec3::y()).unwrap(),
                fov_v: 50.0,
                tension: 0.0,
            }
        })
        .collect();
    KeyframeTrack {
        keyframes,
        total_frames: 49,
        smoothness: None,
    }
}

#[test]
fn passes_through_every_keyframe() {
    let track = arc_track(3.0, 2.0);
    let seq = interpolate_track(&track, &base()).unwrap();
    for k in &track.keyframes {
        let c = &seq[k.frame_index];
        assert!((c.pose.center - k.pose.center).norm() < 1e-9);
        assert!(rotation_distance(&c.pose.rotation, &k.pose.rotation) < 1e-9);
        assert!((c.intrinsics.fov_v_deg() - 50.0).abs() < 1e-9);
    }
}

#[test]
fn circle_arc_is_reproduced() {
    for sweep in [std::f64::consts::FRAC_PI_2, std::f64::consts::PI, 1.5 * std::f64::consts::PI] {
        let radius = 2.5;
        let seq = interpolate_track(&arc_track(radius, sweep), &base()).unwrap();
        for c in seq.iter() {
            let off = (c.pose.center.norm() - radius).abs();
            assert!(off < 0.01 * radius, "sweep {sweep}: off by {off}");
        }
    }
}

#[test]
fn smoothing_keeps_constants_and_commutes_with_rigid_motion() {
    let mut r = rng(21);
    let cam = Camera::new(base(), CameraPose { rotation: random_rotation(&mut r), center: Vec3::new(1.0, -2.0, 0.5) });
    let constant = CameraSequence::constant(cam, 30);
    let smoothed = gaussian_smooth(&constant, 3.0).unwrap();
    for c in smoothed.iter() {
        assert!((c.pose.center - cam.pose.center).norm() < 1e-12);
        assert!((c.pose.rotation - cam.pose.rotation).amax() < 1e-12);
    }

    let seq = interpolate_track(&arc_track(2.0, 3.0), &base()).unwrap();
    let g_rot = random_rotation(&mut r);
    let g_t = Vec3::new(5.0, -1.0, 2.0);
    let moved = |s: &CameraSequence| {
        CameraSequence::new(
            s.iter()
                .map(|c| {
                    Camera::new(
                        c.intrinsics,
                        CameraPose {
                            rotation: g_rot * c.pose.rotation,
                            center: g_rot * c.pose.center + g_t,
                        },
                    )
                })
                .collect(),
        )
        .unwrap()
    };
    for sigma in [0.7, 2.0, 6.0] {
        let a = moved(&gaussian_smooth(&seq, sigma).unwrap());
        let b = gaussian_smooth(&moved(&seq), sigma).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x.pose.center - y.pose.center).norm() < 1e-9);
            assert!(rotation_distance(&x.pose.rotation, &y.pose.rotation) < 1e-9);
        }
    }
}

#[test]
fn smoothing_reduces_jitter() {
    let mut r = rng(22);
    let seq = interpolate_track(&arc_track(2.0, 2.0), &base()).unwrap();
    let jittered = CameraSequence::new(
        seq.iter()
            .map(|c| {
                Camera::new(
                    c.intrinsics,
                    CameraPose {
                        rotation: axis_angle(&random_unit(&mut r), 0.05) * c.pose.rotation,
                        center: c.pose.center + random_unit(&mut r) * 0.05,
                    },
                )
            })
            .collect(),
    )
    .unwrap();
    let accel = |s: &CameraSequence| {
        (1..s.len() - 1)
            .map(|i| (s[i - 1].pose.center - 2.0 * s[i].pose.center + s[i + 1].pose.center).norm())
            .sum::<f64>()
    };
    assert!(accel(&gaussian_smooth(&jittered, 2.0).unwrap()) < 0.5 * accel(&jittered));
}
