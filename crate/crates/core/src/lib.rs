//! Algorithms for segmentation with soft (distributional) labels.
//!
//! Everything in this crate is deterministic given explicit seeds and runs
//! on owned buffers; file formats, image IO, and the command line live in
//! the companion `softseg-cli` crate.
//!
//! The main pieces:
//!
//! - [`ontology`]: a three-level label hierarchy with probability-conserving
//!   upward remapping between levels.
//! - [`annotations`]: polygon cleaning rules and scanline rasterization into
//!   per-annotator masks.
//! - [`fusion`]: soft-label construction from multiple annotators, majority
//!   voting with ambiguity handling, and STAPLE consensus estimation.
//! - [`agreement`]: Fleiss' kappa, bootstrap confidence intervals, and
//!   pixel-level agreement statistics.
//! - [`imaging`]: Otsu foreground masking, bicubic resampling, patch
//!   sampling, and light augmentation.
//! - [`objectives`]: distributional loss functions with analytic gradients
//!   with respect to logits.
//! - [`metrics`]: evaluation metrics under foreground/ambiguity masking,
//!   including remapped-level evaluation.
//! - [`model`]: a small U-Net-style segmenter with manual backpropagation,
//!   AdamW, and a reduce-on-plateau schedule.
//! - [`inference`]: Gaussian-blended sliding-window prediction and overlay
//!   rendering.
//! - [`splitter`]: train/val/test assignment minimizing the L1 distance
//!   between split-wise class distributions.
//! - [`synthkit`]: synthetic scenes and simulated disagreeing annotators
//!   for end-to-end validation.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agreement;
pub mod annotations;
pub mod fusion;
pub mod imaging;
pub mod inference;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ontology;
pub mod rng;
pub mod splitter;
pub mod synthkit;

pub use ontology::{Level, Ontology, OntologyError, OntologyNode};
