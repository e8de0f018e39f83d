//! Holistic label filtering for semantic segmentation.
//!
//! The crate bundles a small dense-tensor substrate with hand-written
//! vector-Jacobian products, the four standard segmentation metrics,
//! hard and soft (differentiable) holistic filters, the label-contamination
//! grid used to study how label-set precision and recall affect filtering,
//! and a toy two-stream network that trains end to end through the soft
//! filter. File formats used by the command-line tool live in [`io`].

pub mod config;
pub mod contamination;
mod error;
pub mod filter;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod micronet;
pub mod rng;
pub mod tensor;

pub use contamination::{contaminate, run_grid, ContaminationSpec, GridOutput, GridRecord};
pub use error::{Error, Result};
pub use filter::{
    filter_then_upsample, gt_confidence, hard_filter_argmax, soft_filter, threshold_labels,
    FilterOrder, HolisticConfidence, ScoreMapSet,
};
pub use metrics::{
    label_set_pr, ConfusionMatrix, LabelMap, LabelSet, LabelSetPR, MetricReport,
    DEFAULT_IGNORE_LABEL,
};
pub use micronet::{MicroNetConfig, MicroNetParams, TrainSample, Variant};
pub use tensor::{grad_check, GradPair, Tensor, NEG_MASK};
