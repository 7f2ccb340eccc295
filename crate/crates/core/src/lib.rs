//! Text-based explanations for scene classifiers.
//!
//! The crate consumes exported classifier artifacts (a probability vector,
//! object detections and a saliency heatmap per image) and produces, for each
//! image, one of three explanation scenarios together with a sentence:
//!
//! 1. a confident prediction explained by the detected objects that overlap
//!    the salient region ([`validation`]),
//! 2. an unconfident prediction relabeled from object–class occurrence
//!    statistics ([`spc`]),
//! 3. an unconfident prediction that nothing can support.
//!
//! [`tuning`] grid-searches the three thresholds with k-fold cross
//! validation and [`synthgen`] fabricates corpora with planted statistics.

pub mod cli;
pub mod ingest;
pub mod pipeline;
pub mod saliency;
pub mod sentence;
pub mod spc;
pub mod synthgen;
pub mod tuning;
pub mod validation;

pub use ingest::{ImageRecord, Manifest, ProbVector};
pub use pipeline::{Explainer, Explanation, Scenario, ThresholdConfig};
pub use saliency::{BinarizeMode, BinaryMask, Heatmap};
pub use sentence::TemplateSet;
pub use spc::{ClassScores, SpcModel};
pub use validation::{BoundingBox, Detection, DetectionSet, ValidatedObject};
