//! Equivariant audio-visual contrastive learning at desk scale.
//!
//! Two modality encoders feed a shared attention-based transformation
//! predictor. Intra-modal losses align predicted (equivariant) embeddings
//! with embeddings of augmented inputs; the inter-modal loss contrasts
//! centroids of several predicted representations across modalities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{CheckpointError, Error, Result};
