//! LiDAR intensity simulation: point-cloud ingest, spherical projection,
//! incidence-angle estimation, U-Net and Pix2Pix intensity models, training
//! and evaluation.

pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod ingest;
pub mod models;
pub mod pipeline;
pub mod projection;
pub mod synth;

pub use intensim_tensor as tensor;
pub use intensim_tensor::Scalar;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{incidence_channel, IncidenceChannel, NeighborIndex};
pub use ingest::{CameraFrame, PointCloud};
pub use projection::{spherical_project, Channel, ModalityCombo, ProjectionConfig, SphericalImage};
pub use models::{build_unet, ArchKind, Checkpoint, PatchGan, UNet};
pub use synth::{synth_scene, Scene, SynthFrame, SynthSceneConfig};

pub type PointCloud32 = PointCloud<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type SphericalImage32 = SphericalImage<f32>;
pub type SphericalImage64 = SphericalImage<f64>;
pub type CameraFrame32 = CameraFrame<f32>;
