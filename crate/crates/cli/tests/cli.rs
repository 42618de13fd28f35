use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

use reshoot_core::geometry::{axis_angle, CameraPose, Vec3};
use reshoot_core::scene_io::{load_cameras, save_cameras, save_scene, DepthFormat};
use reshoot_core::synthetic::SyntheticScene;
use reshoot_core::trajectory::CameraKeyframe;
use reshoot_core::{
    Camera, CameraIntrinsics, CameraSequence, KeyframeTrack, ReconInput, SimilarityTransform,
};
use reshoot_server::{CreateSession, Server, ServerConfig};

fn reshoot(args: &[&str]) -> Output {
    reshoot_env(args, &[])
}

fn reshoot_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reshoot"));
    cmd.args(args).env_remove("RESHOOT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--output", p(dir), "--frames", "4", "--width", "40", "--height", "30"];
    args.extend_from_slice(extra);
    let v = stdout_json(&reshoot(&args));
    PathBuf::from(v["scene"].as_str().unwrap())
}

#[test]
fn lift_persist_render_eval_reproduces_the_source() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &["--pan", "0", "--shift", "0"]);

    let lift = stdout_json(&reshoot(&["lift", "--scene", p(&scene), "--output", p(&d.join("clouds"))]));
    assert_eq!(lift["frames"], 4);
    assert_eq!(lift["total_points"], 4 * 40 * 30);

    let persist = stdout_json(&reshoot(&[
        "persist",
        "--clouds",
        p(&d.join("clouds")),
        "--output",
        p(&d.join("cloud.ply")),
    ]));
    assert_eq!(persist["frames"], 4);

    let render = stdout_json(&reshoot(&[
        "render",
        "--cloud",
        p(&d.join("cloud.ply")),
        "--cameras",
        p(&d.join("scene/cameras.json")),
        "--output",
        p(&d.join("out")),
    ]));
    assert_eq!(render["frames"], 4);
    assert!(render["coverage"].as_array().unwrap().iter().all(|c| c.as_u64() == Some(1200)));

    let eval = stdout_json(&reshoot(&[
        "eval",
        "psnr",
        "--generated",
        p(&d.join("out/render")),
        "--reference",
        p(&d.join("scene/rgb")),
        "--mask",
        p(&d.join("out/alpha")),
    ]));
    assert_eq!(eval["psnr"], "inf");
    assert!(eval["per_frame"].as_array().unwrap().iter().all(|v| v == "inf"));
}

#[test]
fn render_length_mismatch_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &[]);
    stdout_json(&reshoot(&["memory", "init", "--scene", p(&scene), "--state", p(&d.join("state"))]));
    let mut cams = load_cameras(&d.join("scene/cameras.json")).unwrap();
    cams.cameras.pop();
    save_cameras(&d.join("short.json"), &cams).unwrap();

    let o = reshoot(&[
        "render",
        "--cloud",
        p(&d.join("state/cloud.ply")),
        "--cameras",
        p(&d.join("short.json")),
        "--output",
        p(&d.join("out")),
    ]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("shape mismatch") && err.contains("3 cameras"), "{err}");
    assert!(!d.join("out").exists());

    let clamped = stdout_json(&reshoot(&[
        "render",
        "--cloud",
        p(&d.join("state/cloud.ply")),
        "--cameras",
        p(&d.join("short.json")),
        "--clamp-frames",
        "--output",
        p(&d.join("out")),
    ]));
    assert_eq!(clamped["frames"], 3);
}

#[test]
fn eval_cameras_reports_zero_for_identical_files_and_aligns() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synth(&d.join("scene"), &["--pan", "30"]);
    let cams = d.join("scene/cameras.json");
    let o = reshoot(&["eval", "cameras", "--generated", p(&cams), "--target", p(&cams)]);
    let v = stdout_json(&o);
    assert_eq!((v["rot_err"].as_f64(), v["trans_err"].as_f64(), v["intr_err"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    assert_eq!(v["per_frame"].as_array().unwrap().len(), 4);
    let table = String::from_utf8_lossy(&o.stderr);
    assert!(table.contains("rot_err_deg") && table.contains("mean"), "{table}");

    let s = SimilarityTransform::new(2.5, axis_angle(&Vec3::new(0.3, 1.0, -0.2).normalize(), 1.1), Vec3::new(4.0, -2.0, 7.0)).unwrap();
    let target = wobble(6);
    let cams = d.join("wobble.json");
    save_cameras(&cams, &target).unwrap();
    let moved = CameraSequence::new(
        target
            .iter()
            .map(|c| Camera::new(c.intrinsics, s.apply_pose(&c.pose)))
            .collect(),
    )
    .unwrap();
    save_cameras(&d.join("moved.json"), &moved).unwrap();
    let raw = stdout_json(&reshoot(&["eval", "cameras", "--generated", p(&d.join("moved.json")), "--target", p(&cams)]));
    assert!(raw["trans_err"].as_f64().unwrap() > 1.0);
    let aligned = stdout_json(&reshoot(&[
        "eval",
        "cameras",
        "--generated",
        p(&d.join("moved.json")),
        "--target",
        p(&cams),
        "--align",
        "similarity",
    ]));
    assert!(aligned["trans_err"].as_f64().unwrap() < 1e-18);
    assert!(aligned["rot_err"].as_f64().unwrap() < 1e-9);
    assert!((aligned["alignment"]["scale"].as_f64().unwrap() - 0.4).abs() < 1e-9);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(&reshoot(&["--help"])), 0);
    assert_eq!(code(&reshoot(&["render", "--cloud", "x.ply", "--output", "o"])), 1);
    assert_eq!(code(&reshoot(&["bogus"])), 1);
    assert_eq!(code(&reshoot(&["render", "--cloud", "x.ply", "--track", "t.json", "--output", "o"])), 1);

    let missing = reshoot(&["lift", "--scene", p(&d.join("nope.json")), "--output", p(&d.join("o"))]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    std::fs::write(d.join("bad.json"), "{\"version\": 1,").unwrap();
    assert_eq!(code(&reshoot(&["lift", "--scene", p(&d.join("bad.json")), "--output", p(&d.join("o"))])), 1);

    let scene = synth(&d.join("scene"), &[]);
    let threads = reshoot_env(&["lift", "--scene", p(&scene), "--output", p(&d.join("o"))], &[("RESHOOT_THREADS", "zero")]);
    assert_eq!(code(&threads), 1);
    let one = reshoot_env(&["lift", "--scene", p(&scene), "--output", p(&d.join("o"))], &[("RESHOOT_THREADS", "1")]);
    assert_eq!(code(&one), 0);
}

fn wobble(n: usize) -> CameraSequence {
    let k = CameraIntrinsics::from_fov(60.0, 32, 24).unwrap();
    CameraSequence::new(
        (0..n)
            .map(|i| {
                let t = i as f64;
                Camera::new(
                    k,
                    CameraPose {
                        rotation: axis_angle(&Vec3::y(), 0.3 * (t * 0.5).sin()) * axis_angle(&Vec3::x(), 0.1 * (t * 0.7).cos()),
                        center: Vec3::new(0.8 * (t * 0.6).sin(), 0.3 * (t * 0.9).cos(), -1.0 + 0.05 * t),
                    },
                )
            })
            .collect(),
    )
    .unwrap()
}

fn subset(v: &ReconInput, ids: &[usize], s: &SimilarityTransform) -> ReconInput {
    ReconInput {
        frames: ids.iter().map(|&i| v.frames[i].clone()).collect(),
        depths: ids.iter().map(|&i| v.depths[i].map(|d| d * s.scale)).collect(),
        cams: CameraSequence::new(
            ids.iter()
                .map(|&i| Camera::new(v.cams[i].intrinsics, s.apply_pose(&v.cams[i].pose)))
                .collect(),
        )
        .unwrap(),
        static_masks: ids.iter().map(|&i| v.static_masks[i].clone()).collect(),
    }
}

#[test]
fn memory_register_recovers_a_corrupted_chunk_and_flags_bad_anchors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let truth = SyntheticScene::default().video(&wobble(8)).unwrap();
    let initial = save_scene(&d.join("initial"), &subset(&truth, &[0, 1, 2, 3, 4], &SimilarityTransform::identity()), DepthFormat::Rfd).unwrap();
    let s = SimilarityTransform::new(0.5, axis_angle(&Vec3::new(1.0, 2.0, 0.5).normalize(), 0.8), Vec3::new(3.0, 1.0, -2.0)).unwrap();
    let chunk = save_scene(&d.join("chunk"), &subset(&truth, &[0, 2, 4, 5, 6, 7], &s), DepthFormat::Rfd).unwrap();
    std::fs::write(d.join("anchors.json"), json!([[0, 0], [1, 2], [2, 4]]).to_string()).unwrap();
    std::fs::write(d.join("swapped.json"), json!([[0, 4], [1, 0], [2, 2]]).to_string()).unwrap();

    stdout_json(&reshoot(&["memory", "init", "--scene", p(&initial), "--state", p(&d.join("state"))]));
    let bad = reshoot(&[
        "memory",
        "register",
        "--state",
        p(&d.join("state")),
        "--chunk",
        p(&chunk),
        "--anchors",
        p(&d.join("swapped.json")),
    ]);
    assert_eq!(code(&bad), 3, "{}", String::from_utf8_lossy(&bad.stderr));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("misregistration"));

    let ok = stdout_json(&reshoot(&[
        "memory",
        "register",
        "--state",
        p(&d.join("state")),
        "--chunk",
        p(&chunk),
        "--anchors",
        p(&d.join("anchors.json")),
        "--output",
        p(&d.join("state2")),
    ]));
    assert_eq!(ok["frames"], 8);
    assert!(ok["registration"]["mean_residual"].as_f64().unwrap() < 1e-9);
    let cams = load_cameras(&d.join("state2/cameras.json")).unwrap();
    for i in 0..8 {
        assert!((cams[i].pose.center - truth.cams[i].pose.center).norm() < 1e-6, "frame {i}");
    }
    assert_eq!(load_cameras(&d.join("state/cameras.json")).unwrap().len(), 5);
}

#[test]
fn dry_run_validates_and_writes_nothing() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let o = reshoot(&["synth", "--output", p(&d.join("scene")), "--dry-run"]);
    assert_eq!(stdout_json(&o)["dry_run"], true);
    assert!(!d.join("scene").exists());

    let scene = synth(&d.join("scene"), &[]);
    let before: Vec<_> = walk(d);
    let result = d.join("result.json");
    for args in [
        vec!["lift", "--scene", p(&scene), "--output", p(&d.join("clouds"))],
        vec!["datagen", "--scene", p(&scene), "--mode", "multiview", "--output", p(&d.join("bundle"))],
        vec!["memory", "init", "--scene", p(&scene), "--state", p(&d.join("state"))],
        vec!["render", "--cloud", p(&d.join("nope.ply")), "--cameras", p(&d.join("scene/cameras.json")), "--output", p(&d.join("r"))],
    ] {
        let mut a = args.clone();
        a.extend(["--dry-run", "--out", p(&result)]);
        let o = reshoot(&a);
        if args[0] == "render" {
            assert_eq!(code(&o), 2);
        } else {
            assert_eq!(stdout_json(&o)["dry_run"], true);
        }
    }
    assert_eq!(walk(d), before);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        }
        out.push(path);
    }
    out.sort();
    out
}

#[test]
fn datagen_and_render_are_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &[]);
    let run = |mode: &str, out: &str| {
        let o = reshoot(&["datagen", "--scene", p(&scene), "--mode", mode, "--magnitude", "0.2", "--output", p(&d.join(out))]);
        let v = stdout_json(&o);
        assert!(String::from_utf8_lossy(&o.stderr).contains("seed 0"));
        let m: Value = serde_json::from_slice(&std::fs::read(v["bundle"].as_str().unwrap()).unwrap()).unwrap();
        (m["checksums"].clone(), m["provenance"].clone())
    };
    let (a, pa) = run("double-reprojection", "a");
    let (b, _) = run("double-reprojection", "b");
    assert_eq!(a, b);
    assert_eq!(pa["params"]["seed"], 0);
    assert_eq!(pa["mode"], "double_reprojection");
    let (c, pc) = run("multiview", "c");
    assert_ne!(a, c);
    assert_eq!(pc["params"]["persistence"], true);

    stdout_json(&reshoot(&["memory", "init", "--scene", p(&scene), "--state", p(&d.join("state"))]));
    let render = |out: &str| {
        stdout_json(&reshoot(&[
            "render",
            "--cloud",
            p(&d.join("state/cloud.ply")),
            "--cameras",
            p(&d.join("state/cameras.json")),
            "--radius",
            "1",
            "--output",
            p(&d.join(out)),
        ]));
        std::fs::read(d.join(out).join("render.json")).unwrap()
    };
    assert_eq!(render("r1"), render("r2"));
}

fn track(total: usize) -> KeyframeTrack {
    let key = |frame: usize, x: f64, tension: f64| CameraKeyframe {
        frame_index: frame,
        pose: CameraPose::look_at(Vec3::new(x, 0.1, -0.5), Vec3::new(0.0, 0.0, 3.0), Vec3::y()).unwrap(),
        fov_v: 55.0 + x * 10.0,
        tension,
    };
    KeyframeTrack {
        keyframes: vec![key(0, -0.4, 0.0), key(2, 0.1, 0.3), key(total - 1, 0.4, 0.0)],
        total_frames: total,
        smoothness: None,
    }
}

#[test]
fn render_track_matches_the_full_scale_server_preview() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &[]);
    stdout_json(&reshoot(&["memory", "init", "--scene", p(&scene), "--state", p(&d.join("state"))]));
    let tr = track(4);
    std::fs::write(d.join("track.json"), tr.to_json()).unwrap();
    stdout_json(&reshoot(&[
        "render",
        "--cloud",
        p(&d.join("state/cloud.ply")),
        "--track",
        p(&d.join("track.json")),
        "--intrinsics-from",
        p(&d.join("state/cameras.json")),
        "--output",
        p(&d.join("out")),
    ]));

    let server = Server::new(ServerConfig::default());
    let session = server
        .open_session(&CreateSession {
            scene_path: d.join("state"),
            preview_scale: Some(1.0),
            point_ratio: Some(1.0),
            point_radius: None,
            background: None,
        })
        .unwrap();
    let state = session.set_track(tr).unwrap();
    for f in 0..4 {
        let preview = session.render_preview(&state, f, None).unwrap().unwrap();
        let cli = std::fs::read(d.join(format!("out/render/{f:05}.png"))).unwrap();
        assert_eq!(preview.png, cli, "frame {f}");
    }
}

#[test]
fn edit_deletes_selected_points() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &[]);
    stdout_json(&reshoot(&["memory", "init", "--scene", p(&scene), "--state", p(&d.join("state"))]));
    std::fs::write(
        d.join("ops.json"),
        json!([{"select": {"type": "dynamic"}, "action": {"type": "delete"}}]).to_string(),
    )
    .unwrap();
    let v = stdout_json(&reshoot(&[
        "edit",
        "--cloud",
        p(&d.join("state/cloud.ply")),
        "--ops",
        p(&d.join("ops.json")),
        "--output",
        p(&d.join("static.ply")),
    ]));
    let after = v["points_after"].as_u64().unwrap();
    assert!(after < v["points_before"].as_u64().unwrap());
    let cloud = reshoot_core::scene_io::load_cloud(&d.join("static.ply")).unwrap();
    assert_eq!(cloud.len() as u64, after);
    assert!(cloud.dynamic_by_frame.iter().all(|f| f.is_empty()));
}

#[test]
fn serve_opens_the_scene_session_and_answers_http() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let scene = synth(&d.join("scene"), &[]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_reshoot"))
        .args(["serve", "--port", "0", "--scene", p(&scene), "--quiet"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut text = String::new();
    loop {
        let mut line = String::new();
        assert!(reader.read_line(&mut line).unwrap() > 0, "server exited early");
        text.push_str(&line);
        if line == "}\n" {
            break;
        }
    }
    let started: Value = serde_json::from_str(&text).unwrap();
    let id = started["session"]["id"].as_str().unwrap();
    assert_eq!(started["session"]["frames"], 4);

    let mut s = TcpStream::connect(started["address"].as_str().unwrap()).unwrap();
    write!(s, "GET /session/{id}/cloud?max_points=7 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = Vec::new();
    s.read_to_end(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let head_end = resp.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    assert!(resp.starts_with(b"HTTP/1.1 200"));
    let body = &resp[head_end..];
    assert_eq!(&body[..4], b"RCP1");
    assert_eq!(u32::from_le_bytes(body[4..8].try_into().unwrap()), 7);
}
