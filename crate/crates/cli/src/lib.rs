//! `reshoot` command line. Machine-readable results go to standard output
//! (or `--out`), progress to standard error.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 I/O failure, 3 numeric
//! or registration failure.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reshoot_core::{Error, ErrorKind, RenderOptions};

#[derive(Debug, Parser)]
#[command(name = "reshoot", version, about = "Point-cloud reshooting toolkit")]
pub struct Cli {
    /// Validate every input and print what would be done without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Write the JSON result here instead of standard output.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift every frame of a scene into a per-frame PLY point cloud.
    Lift(LiftArgs),
    /// Merge per-frame clouds into one temporally persistent cloud.
    Persist(PersistArgs),
    /// Render a persistent cloud along a camera sequence or keyframe track.
    Render(RenderArgs),
    /// Build a conditioning bundle from a scene.
    Datagen(DatagenArgs),
    /// Compare camera trajectories or rendered sequences.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Maintain the long-video global state.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Run the interactive preview server.
    Serve(ServeArgs),
    /// Write a synthetic test scene.
    Synth(SynthArgs),
    /// Apply selection-based edits to a persistent cloud.
    Edit(EditArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RenderFlags {
    /// Splat radius in pixels; 0 draws single pixels.
    #[arg(long, default_value_t = 0)]
    pub radius: u32,
    /// Points at or in front of this camera depth are dropped.
    #[arg(long, default_value_t = 1e-4)]
    pub near: f64,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub background: [f32; 3],
}

impl RenderFlags {
    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            point_radius: self.radius,
            near_clip: self.near,
            background: self.background,
        }
    }
}

fn parse_rgb(s: &str) -> Result<[f32; 3], String> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => Err("expected three comma-separated values in [0, 1]".into()),
    }
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory receiving `%05d.ply`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PersistArgs {
    /// Directory of per-frame PLY files, taken in name order.
    #[arg(long)]
    pub clouds: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Keep one static point per voxel of this edge length.
    #[arg(long)]
    pub dedup_voxel: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("path").required(true).args(["cameras", "track"]))]
pub struct RenderArgs {
    /// Persistent cloud PLY.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Dense camera sequence JSON.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Keyframe track JSON, interpolated before rendering.
    #[arg(long, requires = "intrinsics_from")]
    pub track: Option<PathBuf>,
    /// Camera JSON whose first camera supplies image size and principal point for `--track`.
    #[arg(long)]
    pub intrinsics_from: Option<PathBuf>,
    /// Frames past the cloud's last frame reuse that frame's dynamic points
    /// instead of failing the length check.
    #[arg(long)]
    pub clamp_frames: bool,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatagenMode {
    DoubleReprojection,
    Multiview,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Heuristic {
    Orbit,
    Offset,
    Dolly,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum)]
    pub mode: DatagenMode,
    /// Bundle directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Explicit cameras: source cameras for double reprojection, target
    /// cameras for multiview. Replaces the heuristic.
    #[arg(long, conflicts_with_all = ["heuristic", "magnitude", "seed"])]
    pub cameras: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Heuristic::Orbit)]
    pub heuristic: Heuristic,
    /// Radians for orbit, world units for offset and dolly.
    #[arg(long, default_value_t = 0.3)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiview only: render each frame's own points without the persistent pool.
    #[arg(long)]
    pub no_persistence: bool,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Alignment {
    None,
    Rigid,
    Similarity,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Camera error report between two camera JSON files.
    Cameras {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Align the generated centers to the target before measuring.
        #[arg(long, value_enum, default_value_t = Alignment::None)]
        align: Alignment,
    },
    /// Masked PSNR between two PNG sequences.
    Psnr {
        /// Directory of generated PNG frames.
        #[arg(long)]
        generated: PathBuf,
        /// Directory of reference PNG frames.
        #[arg(long)]
        reference: PathBuf,
        /// Directory of mask PNG frames.
        #[arg(long)]
        mask: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Create a state directory from an initial scene.
    Init {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        state: PathBuf,
    },
    /// Register a chunk reconstruction into a state directory.
    Register {
        #[arg(long)]
        state: PathBuf,
        /// Scene manifest of the chunk, in its own coordinates.
        #[arg(long)]
        chunk: PathBuf,
        /// JSON list of `[chunk_frame, global_frame]` anchor pairs.
        #[arg(long)]
        anchors: PathBuf,
        /// Where to write the updated state; defaults to `--state`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Fit a rigid transform instead of a similarity.
        #[arg(long)]
        no_scale: bool,
        /// Misregistration limit as a fraction of the camera-center bounding-box diagonal.
        #[arg(long, default_value_t = 0.05)]
        max_residual_ratio: f64,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8787)]
    pub port: u16,
    /// Open a session for this scene at startup.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub preview_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub point_ratio: f64,
    /// Additional CORS origin; repeatable.
    #[arg(long)]
    pub allow_origin: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthFormatArg {
    Rfd,
    Png16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 48)]
    pub height: u32,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,
    /// Total yaw over the clip in degrees.
    #[arg(long, default_value_t = 20.0)]
    pub pan: f64,
    /// Total sideways camera travel over the clip.
    #[arg(long, default_value_t = 0.3)]
    pub shift: f64,
    #[arg(long, value_enum, default_value_t = DepthFormatArg::Rfd)]
    pub depth_format: DepthFormatArg,
    /// Multiplicative depth noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    /// JSON list of `{select, action}` operations.
    #[arg(long)]
    pub ops: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("RESHOOT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("RESHOOT_THREADS must be a positive integer, got {v:?}")))?;
    // Fails only if a pool already exists, e.g. when run twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RESHOOT_LOG")
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    match configure_threads().and_then(|_| commands::dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
