//! Explicit conditioning for 4D video reshooting: lift depth video into a
//! temporally-persistent point cloud, render it into target cameras, design
//! and smooth camera trajectories, build training bundles, and score camera
//! accuracy.

pub mod error;
pub mod geometry;
pub mod image;
pub mod pointcloud;
pub mod render;
pub mod trajectory;
pub mod eval;
pub mod scene_io;
pub mod datagen;
pub mod memory;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{
    Camera, CameraIntrinsics, CameraPose, CameraSequence, PluckerImage, SimilarityTransform,
};
pub use image::{DepthMap, Grid, Mask, Rgb, RgbImage};
pub use pointcloud::{FramePointCloud, PersistentCloud, Provenance};
pub use render::{RenderOptions, RenderOutput};
pub use datagen::{ConditioningBundle, ReconInput};
pub use memory::{ChunkReconstruction, GlobalState};
pub use trajectory::KeyframeTrack;
