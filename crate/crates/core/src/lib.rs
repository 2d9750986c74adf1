//! Descriptor-free multi-view instance matching.
//!
//! Instance masks from calibrated views are linked through epipolar bands,
//! grouped with symmetric NMF, refined with cluster-aware suppression and
//! lifted to per-instance voxel reconstructions.

pub mod eval;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod raster;
pub mod recon;
pub mod refine;
pub mod scene;
pub mod seed;
pub mod symnmf;
pub mod synth;

pub use geometry::{CameraView, FundamentalMatrix, Line2D};
pub use matching::{MatchGraph, MatchParams};
pub use raster::PixelSet;
pub use recon::{GridSpec, PointCloud, VoxelGrid};
pub use refine::Proposal;
pub use scene::{ClusterAssignment, InstanceMask, SceneManifest};
