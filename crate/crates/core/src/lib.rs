//! Topology-aware segmentation of thin curvilinear structures.
//!
//! A texture mini U-Net produces a coarse multi-class prediction; a second
//! mini U-Net consumes those probabilities, learns a topology embedding at its
//! bottleneck with a triplet loss against ground-truth and deliberately
//! corrupted masks, and decodes a binary foreground map. The two predictions
//! are softly fused into the final segmentation.
//!
//! Besides the model the crate carries the pieces needed to train and judge
//! it: mask corruption, the training objectives, local Betti error, discrete
//! Frechet distance on extracted centerlines, the IoU family, a synthetic
//! curvilinear dataset generator and DRIVE ingestion.

pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    binarize_mask, one_hot, ClassKind, FeatureEmbedding, InputImage, ProbabilityMap,
    SegmentationMask,
};
