//! Finger vein phantom toolkit.
//!
//! The crate turns NIR finger vein images into printable multi-material
//! finger phantoms, renders phantoms under simulated NIR transmission and
//! scores vein pattern similarity with a maximum-curvature / correlation
//! matcher.
//!
//! Data flows roughly as
//!
//! ```text
//! NirImage -> extract (curvature, connect, binarize, skeleton, widths)
//!          -> geometry (project onto cylinder, bones, assemble, mesh/DXF)
//!          -> render (Beer-Lambert transmission) -> NirImage
//!          -> matching (ICP + correlation) -> eval (pair plans, histograms)
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod demo;
pub mod error;
pub mod eval;
pub mod extract;
pub mod filter;
pub mod geometry;
pub mod image;
pub mod materials;
pub mod matching;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
pub use extract::{BinaryVeinMap, CurvatureScoreMap, ExtractionConfig, SkeletonPoint, VeinSkeleton};
pub use geometry::{
    BoneSegment, ContourSet, FingerPhantomModel, MaterialId, PrinterConstraints, TriangleMesh,
    VeinTube,
};
pub use image::NirImage;
pub use materials::{CalibrationCurve, MaterialSpec, Palette};
pub use matching::{MatchConfig, MatchScore, RigidTransform2D};
pub use render::RenderConfig;
