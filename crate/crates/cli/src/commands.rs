use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use reshoot_core::datagen::{double_reproject, emit_bundle, multiview_condition};
use reshoot_core::eval::{align_trajectories, camera_errors, masked_psnr, Psnr};
use reshoot_core::geometry::Vec3;
use reshoot_core::memory::{register_chunk, RegistrationConfig};
use reshoot_core::pointcloud::{build_persistent_with, edit_cloud, EditOp, PersistOptions};
use reshoot_core::render::{render_video, render_video_mapped};
use reshoot_core::scene_io::{
    encode_depth_bin, encode_mask_png, encode_rgb_png, load_cameras, load_cloud, load_points,
    load_scene, read_file, read_mask_png, read_rgb_png, save_cameras, save_cloud, save_points,
    save_scene, sha256_hex, write_file, DepthFormat,
};
use reshoot_core::synthetic::{pan_cameras, perturb_depths, SyntheticScene};
use reshoot_core::trajectory::{
    heuristic_source_cameras, interpolate_track, HeuristicMode, SourceCameraSpec,
};
use reshoot_core::{
    CameraSequence, ChunkReconstruction, Error, GlobalState, KeyframeTrack, RenderOutput, Result,
};
use reshoot_server::{CreateSession, PreviewSettings, Server, ServerConfig, SessionInfo};

use crate::{
    Alignment, Cli, Command, DatagenArgs, DatagenMode, DepthFormatArg, EditArgs, EvalCommand,
    Heuristic, LiftArgs, MemoryCommand, PersistArgs, RenderArgs, ServeArgs, SynthArgs,
};

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Lift(a) => lift(cli, a),
        Command::Persist(a) => persist(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Datagen(a) => datagen(cli, a),
        Command::Eval(e) => eval(cli, e),
        Command::Memory(m) => memory(cli, m),
        Command::Serve(a) => serve(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Edit(a) => edit(cli, a),
    }
}

fn to_text(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON value serializes") + "\n"
}

/// Writes the command result to `--out`, or standard output.
fn emit(cli: &Cli, v: Value) -> Result<()> {
    match &cli.out {
        Some(p) => write_file(p, to_text(&v).as_bytes()),
        None => {
            print!("{}", to_text(&v));
            Ok(())
        }
    }
}

/// Dry-run report. Always printed, never written.
fn planned(cli: &Cli, command: &str, writes: &[PathBuf], details: Value) -> Result<()> {
    let mut v = json!({
        "dry_run": true,
        "command": command,
        "would_write": writes,
    });
    if let (Value::Object(base), Value::Object(extra)) = (&mut v, details) {
        base.extend(extra);
    }
    if let Some(out) = &cli.out {
        v["would_write_result"] = json!(out);
    }
    print!("{}", to_text(&v));
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no .{ext} files in {}", dir.display())));
    }
    Ok(out)
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:05}.{ext}")
}

fn lift(cli: &Cli, a: &LiftArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let paths: Vec<PathBuf> = (0..scene.len())
        .map(|i| a.output.join(frame_name(i, "ply")))
        .collect();
    if cli.dry_run {
        return planned(cli, "lift", &paths, json!({"frames": scene.len()}));
    }
    log::info!("lifting {} frames", scene.len());
    let clouds = scene.lift()?;
    for (c, p) in clouds.iter().zip(&paths) {
        save_points(p, c)?;
    }
    let points: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
    emit(
        cli,
        json!({
            "frames": scene.len(),
            "total_points": points.iter().sum::<usize>(),
            "points": points,
            "files": paths,
        }),
    )
}

fn persist(cli: &Cli, a: &PersistArgs) -> Result<()> {
    let files = files_with_ext(&a.clouds, "ply")?;
    let frames = files
        .iter()
        .map(|p| {
            let loaded = load_points(p)?;
            for w in &loaded.warnings {
                log::warn!("{}: {w}", p.display());
            }
            Ok(loaded.points)
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = PersistOptions {
        dedup_voxel: a.dedup_voxel,
    };
    if cli.dry_run {
        if let Some(v) = a.dedup_voxel {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("dedup voxel must be positive, got {v}")));
            }
        }
        for f in &frames {
            f.validate()?;
        }
        return planned(cli, "persist", std::slice::from_ref(&a.output), json!({"frames": frames.len()}));
    }
    log::info!("merging {} frame clouds", frames.len());
    let cloud = build_persistent_with(&frames, &opts)?;
    save_cloud(&cloud, &a.output)?;
    emit(
        cli,
        json!({
            "frames": cloud.frame_count(),
            "static_points": cloud.static_points.len(),
            "dynamic_points": cloud.len() - cloud.static_points.len(),
            "output": a.output,
        }),
    )
}

fn render_cameras(a: &RenderArgs) -> Result<CameraSequence> {
    match (&a.cameras, &a.track, &a.intrinsics_from) {
        (Some(c), None, _) => load_cameras(c),
        (None, Some(t), Some(k)) => {
            let text = String::from_utf8(read_file(t)?)
                .map_err(|_| Error::Config(format!("{}: track is not UTF-8", t.display())))?;
            let track = KeyframeTrack::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", t.display())))?;
            let base = load_cameras(k)?;
            let first = base.get(0).ok_or_else(|| {
                Error::EmptyInput(format!("{} holds no cameras", k.display()))
            })?;
            interpolate_track(&track, &first.intrinsics)
        }
        _ => Err(Error::Config(
            "give either --cameras, or --track with --intrinsics-from".into(),
        )),
    }
}

/// Writes `render/`, `alpha/`, `depth/`, `cameras.json` and a checksummed
/// `render.json` manifest.
fn write_renders(dir: &Path, outs: &[RenderOutput], cams: &CameraSequence, params: Value) -> Result<Value> {
    let files: Vec<(String, Vec<u8>)> = outs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, o)| {
            [
                (format!("render/{}", frame_name(i, "png")), encode_rgb_png(&o.color)),
                (format!("alpha/{}", frame_name(i, "png")), encode_mask_png(&o.alpha)),
                (format!("depth/{}", frame_name(i, "rfd")), encode_depth_bin(&o.depth, Some(i as u32))),
            ]
        })
        .collect();
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
        checksums.insert(name.clone(), sha256_hex(bytes));
    }
    save_cameras(&dir.join("cameras.json"), cams)?;
    checksums.insert("cameras.json".into(), sha256_hex(&read_file(&dir.join("cameras.json"))?));
    let (w, h) = cams.get(0).map_or((0, 0), |c| (c.intrinsics.width, c.intrinsics.height));
    let manifest = json!({
        "version": 1,
        "frames": outs.len(),
        "width": w,
        "height": h,
        "files": {
            "render": "render/%05d.png",
            "alpha": "alpha/%05d.png",
            "depth": "depth/%05d.rfd",
            "cameras": "cameras.json",
        },
        "params": params,
        "checksums": checksums,
    });
    write_file(&dir.join("render.json"), to_text(&manifest).as_bytes())?;
    Ok(manifest)
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let opts = a.render.options();
    opts.validate()?;
    let cloud = load_cloud(&a.cloud)?;
    let cams = render_cameras(a)?;
    let n = cloud.frame_count();
    let mapping: Option<Vec<usize>> = if a.clamp_frames {
        if n == 0 {
            return Err(Error::EmptyInput("cloud has no frames".into()));
        }
        Some((0..cams.len()).map(|i| i.min(n - 1)).collect())
    } else {
        None
    };
    if cli.dry_run {
        if mapping.is_none() && cams.len() != n {
            return Err(Error::Shape(format!("{} cameras for a cloud of {n} frames", cams.len())));
        }
        return planned(
            cli,
            "render",
            std::slice::from_ref(&a.output),
            json!({"frames": cams.len(), "points": cloud.len()}),
        );
    }
    log::info!("rendering {} frames of {} points", cams.len(), cloud.len());
    let outs = match &mapping {
        Some(m) => render_video_mapped(&cloud, &cams, m, &opts)?,
        None => render_video(&cloud, &cams, &opts)?,
    };
    let params = json!({
        "point_radius": opts.point_radius,
        "near_clip": opts.near_clip,
        "background": opts.background,
    });
    let manifest = write_renders(&a.output, &outs, &cams, params)?;
    let coverage: Vec<usize> = outs.iter().map(|o| o.coverage()).collect();
    emit(
        cli,
        json!({
            "frames": outs.len(),
            "coverage": coverage,
            "output": a.output,
            "manifest": manifest,
        }),
    )
}

fn heuristic_mode(h: Heuristic) -> HeuristicMode {
    match h {
        Heuristic::Orbit => HeuristicMode::Orbit,
        Heuristic::Offset => HeuristicMode::Offset,
        Heuristic::Dolly => HeuristicMode::Dolly,
    }
}

fn datagen(cli: &Cli, a: &DatagenArgs) -> Result<()> {
    let opts = a.render.options();
    opts.validate()?;
    let input = load_scene(&a.scene)?;
    let mut params: BTreeMap<String, Value> = BTreeMap::new();
    let cams = match &a.cameras {
        Some(p) => {
            params.insert("cameras".into(), json!(p));
            load_cameras(p)?
        }
        None => {
            let spec = SourceCameraSpec {
                mode: heuristic_mode(a.heuristic),
                magnitude: a.magnitude,
                seed: a.seed,
                pivot: None,
            };
            log::info!("heuristic cameras: {:?}, magnitude {}, seed {}", spec.mode, spec.magnitude, spec.seed);
            params.insert("heuristic".into(), json!(spec.mode));
            params.insert("magnitude".into(), json!(spec.magnitude));
            params.insert("seed".into(), json!(spec.seed));
            heuristic_source_cameras(&input.cams, &spec)?
        }
    };
    if cams.len() != input.len() {
        return Err(Error::Shape(format!("{} cameras for {} frames", cams.len(), input.len())));
    }
    if cli.dry_run {
        return planned(
            cli,
            "datagen",
            std::slice::from_ref(&a.output),
            json!({"frames": input.len(), "params": params}),
        );
    }
    let mut bundle = match a.mode {
        DatagenMode::DoubleReprojection => double_reproject(&input, &cams, &opts)?.1,
        DatagenMode::Multiview => multiview_condition(&input, &cams, !a.no_persistence, &opts)?,
    };
    bundle.provenance.params.extend(params);
    let manifest = emit_bundle(&bundle, &a.output)?;
    let coverage: Vec<usize> = bundle.pc_alpha.iter().map(|m| m.count()).collect();
    emit(
        cli,
        json!({
            "bundle": manifest,
            "frames": bundle.len(),
            "coverage": coverage,
            "provenance": bundle.provenance,
        }),
    )
}

fn eval(cli: &Cli, e: &EvalCommand) -> Result<()> {
    match e {
        EvalCommand::Cameras {
            generated,
            target,
            align,
        } => {
            let gen = load_cameras(generated)?;
            let tgt = load_cameras(target)?;
            if gen.len() != tgt.len() {
                return Err(Error::Shape(format!(
                    "{} has {} cameras, {} has {}",
                    generated.display(),
                    gen.len(),
                    target.display(),
                    tgt.len()
                )));
            }
            if cli.dry_run {
                return planned(cli, "eval cameras", &[], json!({"frames": gen.len()}));
            }
            let (gen, transform) = match align {
                Alignment::None => (gen, None),
                Alignment::Rigid | Alignment::Similarity => {
                    let all: Vec<usize> = (0..gen.len()).collect();
                    let (aligned, s) = align_trajectories(&gen, &all, &tgt, *align == Alignment::Similarity)?;
                    (aligned, Some(s))
                }
            };
            let report = camera_errors(&gen, &tgt)?;
            eprint!("{}", report.to_table());
            let mut v = serde_json::to_value(&report).expect("report serializes");
            if let Some(s) = transform {
                v["alignment"] = serde_json::to_value(s).expect("transform serializes");
            }
            emit(cli, v)
        }
        EvalCommand::Psnr {
            generated,
            reference,
            mask,
        } => {
            let (g, r, m) = (
                files_with_ext(generated, "png")?,
                files_with_ext(reference, "png")?,
                files_with_ext(mask, "png")?,
            );
            for (name, list) in [("reference", &r), ("mask", &m)] {
                if list.len() != g.len() {
                    return Err(Error::CountMismatch {
                        sequence: name.into(),
                        expected: g.len(),
                        found: list.len(),
                    });
                }
            }
            let gen = g.iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>()?;
            let gt = r.iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>()?;
            let masks = m.iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
            if cli.dry_run {
                return planned(cli, "eval psnr", &[], json!({"frames": gen.len()}));
            }
            let psnr = masked_psnr(&gen, &gt, &masks)?;
            let per_frame: Vec<Option<Psnr>> = (0..gen.len())
                .map(|i| masked_psnr(&gen[i..=i], &gt[i..=i], &masks[i..=i]).ok())
                .collect();
            emit(
                cli,
                json!({
                    "frames": gen.len(),
                    "psnr": psnr,
                    "per_frame": per_frame,
                    "masked_pixels": masks.iter().map(|m| m.count()).sum::<usize>(),
                }),
            )
        }
    }
}

fn memory(cli: &Cli, m: &MemoryCommand) -> Result<()> {
    match m {
        MemoryCommand::Init { scene, state } => {
            let input = load_scene(scene)?;
            if cli.dry_run {
                return planned(cli, "memory init", std::slice::from_ref(state), json!({"frames": input.len()}));
            }
            let g = GlobalState::from_recon(&input)?;
            g.save(state)?;
            emit(
                cli,
                json!({
                    "frames": g.frame_count(),
                    "static_points": g.cloud.static_points.len(),
                    "state": state,
                }),
            )
        }
        MemoryCommand::Register {
            state,
            chunk,
            anchors,
            output,
            no_scale,
            max_residual_ratio,
        } => {
            let g = GlobalState::load(state)?;
            let recon = load_scene(chunk)?;
            let anchor_map: Vec<(usize, usize)> = read_json(anchors)?;
            let c = ChunkReconstruction {
                frames: recon.frames,
                depths: recon.depths,
                local_cams: recon.cams,
                static_masks: recon.static_masks,
                anchor_map,
            };
            let cfg = RegistrationConfig {
                with_scale: !no_scale,
                max_residual_ratio: *max_residual_ratio,
                ..RegistrationConfig::default()
            };
            let dest = output.as_ref().unwrap_or(state);
            if cli.dry_run {
                c.as_recon().validate()?;
                return planned(
                    cli,
                    "memory register",
                    std::slice::from_ref(dest),
                    json!({"frames": g.frame_count(), "chunk_frames": c.frames.len(), "anchors": c.anchor_map.len()}),
                );
            }
            let next = register_chunk(&g, &c, &cfg)?;
            next.save(dest)?;
            let record = next.log.last().expect("registration appends a record");
            log::info!(
                "registered chunk {}: mean anchor residual {:.3e}",
                record.chunk,
                record.mean_residual
            );
            emit(
                cli,
                json!({
                    "frames": next.frame_count(),
                    "static_points": next.cloud.static_points.len(),
                    "registration": record,
                    "state": dest,
                }),
            )
        }
    }
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let settings = PreviewSettings {
        scale: a.preview_scale,
        point_ratio: a.point_ratio,
    };
    let errs = settings.validation_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let server = Server::new(ServerConfig {
        allowed_origins: a.allow_origin.clone(),
    });
    let session = match &a.scene {
        Some(scene) if !cli.dry_run => Some(server.open_session(&CreateSession {
            scene_path: scene.clone(),
            preview_scale: Some(a.preview_scale),
            point_ratio: Some(a.point_ratio),
            point_radius: None,
            background: None,
        })?),
        Some(scene) => {
            load_scene(scene)?;
            None
        }
        None => None,
    };
    let addr = format!("{}:{}", a.host, a.port);
    if cli.dry_run {
        return planned(cli, "serve", &[], json!({"address": addr}));
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from(&addr),
        source: e,
    })?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::Io {
            path: PathBuf::from(&addr),
            source: e,
        })?;
        let local = listener.local_addr().map_err(|e| Error::Io {
            path: PathBuf::from(&addr),
            source: e,
        })?;
        emit(
            cli,
            json!({
                "address": local.to_string(),
                "session": session.as_deref().map(SessionInfo::of),
            }),
        )?;
        reshoot_server::serve(listener, server.clone())
            .await
            .map_err(|e| Error::Io {
                path: PathBuf::from(&addr),
                source: e,
            })
    })
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cams = pan_cameras(a.frames, a.width, a.height, a.fov, a.pan, Vec3::new(a.shift, 0.0, 0.0))?;
    if !(a.depth_noise.is_finite() && (0.0..1.0).contains(&a.depth_noise)) {
        return Err(Error::Config(format!("depth noise must be in [0, 1), got {}", a.depth_noise)));
    }
    let manifest = a.output.join("scene.json");
    if cli.dry_run {
        return planned(cli, "synth", &[manifest], json!({"frames": a.frames, "seed": a.seed}));
    }
    log::info!("synthesizing {} frames, seed {}", a.frames, a.seed);
    let mut scene = SyntheticScene::default().video(&cams)?;
    if a.depth_noise > 0.0 {
        scene.depths = perturb_depths(&scene.depths, a.depth_noise, a.seed);
    }
    let fmt = match a.depth_format {
        DepthFormatArg::Rfd => DepthFormat::Rfd,
        DepthFormatArg::Png16 => DepthFormat::Png16,
    };
    let path = save_scene(&a.output, &scene, fmt)?;
    emit(
        cli,
        json!({
            "scene": path,
            "frames": a.frames,
            "width": a.width,
            "height": a.height,
            "seed": a.seed,
        }),
    )
}

fn edit(cli: &Cli, a: &EditArgs) -> Result<()> {
    let cloud = load_cloud(&a.cloud)?;
    let ops: Vec<EditOp> = read_json(&a.ops)?;
    for op in &ops {
        if let reshoot_core::pointcloud::EditAction::Transform { transform }
        | reshoot_core::pointcloud::EditAction::Duplicate { transform } = &op.action
        {
            transform.validate()?;
        }
    }
    if cli.dry_run {
        return planned(cli, "edit", std::slice::from_ref(&a.output), json!({"operations": ops.len()}));
    }
    let edited = edit_cloud(&cloud, &ops);
    save_cloud(&edited, &a.output)?;
    emit(
        cli,
        json!({
            "points_before": cloud.len(),
            "points_after": edited.len(),
            "output": a.output,
        }),
    )
}
