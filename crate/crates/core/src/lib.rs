//! Instance-level Gaussian splatting for open-vocabulary 3D selection.
//!
//! The pipeline has four stages:
//!
//! 1. [`train::train_stage1`] learns a 6-dim instance feature per Gaussian
//!    from per-view boolean masks (intra-mask smoothing plus inter-mask
//!    contrastive losses on rendered feature maps).
//! 2. [`train::train_stage2`] discretizes those features with a two-level
//!    [`codebook::TwoLevelCodebook`] (coarse over `[feature; position]`, fine
//!    over feature) while regressing rendered maps onto the frozen stage-1
//!    features.
//! 3. [`association::associate`] scores every (3D instance, 2D mask) pair per
//!    view by IoU and feature distance and attaches mask embeddings to
//!    instances.
//! 4. [`query`] serves text selection, point classification, click selection
//!    and the evaluation metrics; [`edit`] applies instance-level scene edits.
//!
//! Geometry is never optimized. Rendering is a per-pixel software splatter in
//! [`render`]; feature rendering is linear in the features given cached
//! [`render::BlendWeights`], and [`render::backprop_features`] is its exact
//! adjoint.

pub mod association;
pub mod codebook;
pub mod edit;
pub mod error;
pub mod io;
pub mod losses;
mod par;
pub mod query;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Dimension of the per-Gaussian instance feature.
pub const FEATURE_DIM: usize = 6;

/// Dimension of language embeddings attached to masks and instances.
pub const EMBEDDING_DIM: usize = 512;

/// One instance feature row.
pub type Feature = [f64; FEATURE_DIM];
