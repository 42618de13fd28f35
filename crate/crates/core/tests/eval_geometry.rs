mod common;

use common::*;
use rand::Rng;
use reshoot_core::eval::{align_trajectories, camera_errors, masked_psnr, umeyama};
use reshoot_core::geometry::{
    axis_angle, project, rotation_angle, rotation_distance, unproject, Mat3, Vec3,
};
use reshoot_core::{Camera, CameraPose, CameraSequence, Error, Grid, SimilarityTransform};

#[test]
fn projection_round_trip() {
    let mut r = rng(1);
    for _ in 0..20_000 {
        let k = random_intrinsics(&mut r, 2000);
        let (u, v) = (
            r.random_range(0.0..k.width as f64),
            r.random_range(0.0..k.height as f64),
        );
        let d = 10f64.powf(r.random_range(-2.0..3.0));
        let ((pu, pv), z) = project(&unproject((u, v), d, &k).unwrap(), &k).unwrap();
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9, "{u} {v} {d}");
        assert!((z - d).abs() <= 1e-12 * d);
    }
}

fn relative_errors(s: &SimilarityTransform, truth: &SimilarityTransform) -> (f64, f64, f64) {
    (
        (s.scale - truth.scale).abs() / truth.scale,
        rotation_distance(&s.rotation, &truth.rotation),
        (s.translation - truth.translation).norm() / truth.translation.norm().max(1.0),
    )
}

#[test]
fn umeyama_recovers_constructed_similarities() {
    let mut r = rng(2);
    for _ in 0..300 {
        let truth = random_similarity(&mut r);
        let src: Vec<Vec3> = (0..50)
            .map(|_| random_unit(&mut r) * r.random_range(0.5..5.0))
            .collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let (ds, dr, dt) = relative_errors(&umeyama(&src, &dst, true).unwrap(), &truth);
        assert!(ds < 1e-9 && dr < 1e-9 && dt < 1e-9, "{ds} {dr} {dt}");
    }
}

#[test]
fn umeyama_spec_example_scale_two_quarter_turn() {
    let mut r = rng(3);
    let rot = axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
    let t = Vec3::new(1.0, 2.0, 3.0);
    let src: Vec<Vec3> = (0..50).map(|_| random_unit(&mut r) * 3.0).collect();
    let dst: Vec<Vec3> = src.iter().map(|p| 2.0 * rot * p + t).collect();
    let s = umeyama(&src, &dst, true).unwrap();
    assert!((s.scale - 2.0).abs() < 1e-9);
    assert!(rotation_distance(&s.rotation, &rot) < 1e-9);
    assert!((s.translation - t).norm() < 1e-9);
}

#[test]
fn umeyama_on_mirrored_data_matches_sign_search() {
    let mut r = rng(4);
    let mirror = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
    for _ in 0..50 {
        let src: Vec<Vec3> = (0..30).map(|_| random_unit(&mut r) * r.random_range(0.5..3.0)).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| mirror * p).collect();
        let s = umeyama(&src, &dst, true).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-12);
        let (_, best) = best_proper_similarity(&src, &dst);
        let got = residual(&s, &src, &dst);
        assert!((got - best).abs() <= 1e-9 * best.max(1.0), "{got} vs {best}");
    }
}

#[test]
fn umeyama_residual_is_a_global_minimum() {
    let mut r = rng(5);
    let truth = random_similarity(&mut r);
    let src: Vec<Vec3> = (0..40).map(|_| random_unit(&mut r) * 2.0).collect();
    let dst: Vec<Vec3> = src
        .iter()
        .map(|p| truth.apply(p) + random_unit(&mut r) * 0.05)
        .collect();
    let fit = umeyama(&src, &dst, true).unwrap();
    let best = residual(&fit, &src, &dst);
    for _ in 0..1000 {
        let mut cand = random_similarity(&mut r);
        if r.random_bool(0.5) {
            // Perturb the optimum as well as sampling far away.
            cand = SimilarityTransform::new(
                fit.scale * (1.0 + r.random_range(-1e-3..1e-3)),
                axis_angle(&random_unit(&mut r), 1e-3) * fit.rotation,
                fit.translation + random_unit(&mut r) * 1e-3,
            )
            .unwrap();
        }
        assert!(residual(&cand, &src, &dst) >= best);
    }
}

#[test]
fn umeyama_rejects_degenerate_sets() {
    let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama(&line, &line, true), Err(Error::Rank(_))));
    let two = &line[..2];
    assert!(matches!(umeyama(two, two, true), Err(Error::Rank(_))));
}

fn trajectory(r: &mut impl Rng, n: usize) -> CameraSequence {
    let k = random_intrinsics(r, 64);
    CameraSequence::new(
        (0..n)
            .map(|_| {
                Camera::new(
                    k.with_fov_v(r.random_range(30.0..90.0)).unwrap(),
                    CameraPose {
                        rotation: random_rotation(r),
                        center: random_unit(r) * r.random_range(0.5..4.0),
                    },
                )
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn rotation_error_equals_constructed_angle() {
    let mut r = rng(6);
    let tgt = trajectory(&mut r, 5);
    for step in 0..=31 {
        let theta = (step as f64 * 0.1).min(std::f64::consts::PI);
        let gen = CameraSequence::new(
            tgt.iter()
                .map(|c| {
                    let q = axis_angle(&random_unit(&mut r), theta);
                    Camera::new(c.intrinsics, CameraPose { rotation: q * c.pose.rotation, ..c.pose })
                })
                .collect(),
        )
        .unwrap();
        let rep = camera_errors(&gen, &tgt).unwrap();
        assert!((rep.rot_err - theta).abs() < 1e-9, "θ={theta}: {}", rep.rot_err);
        assert!(rep.trans_err == 0.0 && rep.intr_err == 0.0);
        let back = camera_errors(&tgt, &gen).unwrap();
        assert!((back.rot_err - rep.rot_err).abs() < 1e-12);
    }
}

#[test]
fn camera_error_report_matches_analytic_means() {
    let mut r = rng(7);
    let tgt = trajectory(&mut r, 12);
    let mut want = (0.0, 0.0, 0.0);
    let gen = CameraSequence::new(
        tgt.iter()
            .map(|c| {
                let theta = r.random_range(0.0..3.0);
                let offset = r.random_range(0.0..2.0);
                let dfov = r.random_range(-10.0..10.0);
                want.0 += theta;
                want.1 += offset * offset;
                let fov = c.intrinsics.fov_v_deg();
                let k = c.intrinsics.with_fov_v(fov + dfov).unwrap();
                want.2 += (k.fov_v_deg() - fov).abs();
                Camera::new(
                    k,
                    CameraPose {
                        rotation: c.pose.rotation * axis_angle(&random_unit(&mut r), theta),
                        center: c.pose.center + random_unit(&mut r) * offset,
                    },
                )
            })
            .collect(),
    )
    .unwrap();
    let rep = camera_errors(&gen, &tgt).unwrap();
    let n = 12.0;
    assert!((rep.rot_err - want.0 / n).abs() < 1e-9);
    assert!((rep.trans_err - want.1 / n).abs() < 1e-9);
    assert!((rep.intr_err - want.2 / n).abs() < 1e-9);
    let zero = camera_errors(&tgt, &tgt).unwrap();
    assert_eq!((zero.rot_err, zero.trans_err, zero.intr_err), (0.0, 0.0, 0.0));
}

#[test]
fn rotation_error_invariant_to_shared_global_rotation() {
    let mut r = rng(8);
    let a = trajectory(&mut r, 8);
    let b = trajectory(&mut r, 8);
    let g = random_rotation(&mut r);
    let rot = |s: &CameraSequence| {
        CameraSequence::new(
            s.iter()
                .map(|c| Camera::new(c.intrinsics, CameraPose { rotation: g * c.pose.rotation, ..c.pose }))
                .collect(),
        )
        .unwrap()
    };
    let e0 = camera_errors(&a, &b).unwrap().rot_err;
    let e1 = camera_errors(&rot(&a), &rot(&b)).unwrap().rot_err;
    assert!((e0 - e1).abs() < 1e-9);
}

fn corrupt(s: &SimilarityTransform, seq: &CameraSequence) -> CameraSequence {
    CameraSequence::new(
        seq.iter()
            .map(|c| Camera::new(c.intrinsics, s.apply_pose(&c.pose)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn aligned_report_is_invariant_to_global_similarity() {
    let mut r = rng(9);
    let gt = trajectory(&mut r, 20);
    let noisy = CameraSequence::new(
        gt.iter()
            .map(|c| {
                Camera::new(
                    c.intrinsics,
                    CameraPose {
                        rotation: axis_angle(&random_unit(&mut r), 0.05) * c.pose.rotation,
                        center: c.pose.center + random_unit(&mut r) * 0.1,
                    },
                )
            })
            .collect(),
    )
    .unwrap();
    let anchors: Vec<usize> = (0..20).collect();
    let base = camera_errors(&align_trajectories(&noisy, &anchors, &gt, true).unwrap().0, &gt).unwrap();
    for _ in 0..20 {
        let s = random_similarity(&mut r);
        let moved = corrupt(&s, &noisy);
        let rep = camera_errors(&align_trajectories(&moved, &anchors, &gt, true).unwrap().0, &gt).unwrap();
        assert!((rep.rot_err - base.rot_err).abs() < 1e-9);
        assert!((rep.trans_err - base.trans_err).abs() < 1e-9);
        assert!((rep.intr_err - base.intr_err).abs() < 1e-9);
    }
}

#[test]
fn align_recovers_exact_corruption() {
    let mut r = rng(10);
    let gt = trajectory(&mut r, 10);
    let s = random_similarity(&mut r);
    let anchors = [0, 3, 6, 9];
    let anchor_gt = CameraSequence::new(anchors.iter().map(|&i| gt[i]).collect()).unwrap();
    let (aligned, t) = align_trajectories(&corrupt(&s, &gt), &anchors, &anchor_gt, true).unwrap();
    assert!((t.scale * s.scale - 1.0).abs() < 1e-9);
    for (a, b) in aligned.iter().zip(gt.iter()) {
        assert!((a.pose.center - b.pose.center).norm() < 1e-9);
        assert!(rotation_distance(&a.pose.rotation, &b.pose.rotation) < 1e-9);
    }
    let scale_only = SimilarityTransform::new(3.0, Mat3::identity(), Vec3::zeros()).unwrap();
    let (_, t) = align_trajectories(&corrupt(&scale_only, &gt), &anchors, &anchor_gt, true).unwrap();
    assert!((t.scale - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn psnr_matches_pixel_loop() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (w, h) = (r.random_range(1..20), r.random_range(1..20));
        let frames = r.random_range(1..4);
        let img = |r: &mut rand_chacha::ChaCha8Rng| {
            Grid::from_fn(w, h, |_, _| [0, 1, 2].map(|_| r.random_range(0.0..1.0f32)))
        };
        let gen: Vec<_> = (0..frames).map(|_| img(&mut r)).collect();
        let gt: Vec<_> = (0..frames).map(|_| img(&mut r)).collect();
        let mut mask: Vec<_> = (0..frames)
            .map(|_| Grid::from_fn(w, h, |_, _| r.random_bool(0.5)))
            .collect();
        mask[0].data[0] = true;
        let (mut sum, mut n) = (0.0, 0.0);
        for f in 0..frames {
            for i in 0..(w * h) as usize {
                if mask[f].data[i] {
                    for c in 0..3 {
                        sum += (gen[f].data[i][c] as f64 - gt[f].data[i][c] as f64).powi(2);
                        n += 1.0;
                    }
                }
            }
        }
        let want = 10.0 * (1.0 / (sum / n)).log10();
        let got = masked_psnr(&gen, &gt, &mask).unwrap().0;
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn rotation_angle_near_pi_and_zero() {
    for theta in [0.0, 1e-9, 1e-5, 3.0, std::f64::consts::PI - 1e-7, std::f64::consts::PI] {
        let a = rotation_angle(&axis_angle(&Vec3::new(1.0, 2.0, -0.5).normalize(), theta));
        assert!((a - theta).abs() < 1e-9, "{theta} -> {a}");
    }
}
