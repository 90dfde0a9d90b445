//! Evaluation harness for the gdt tracker: OTB-style sequence loading, one-pass
//! evaluation, precision/success curves, per-attribute reports, synthetic sequences and
//! the `gdt` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons also reject NaN

use std::path::Path;

use thiserror::Error;

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod ope;
pub mod report;
pub mod synth;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("sequence has {frames} frames but {boxes} ground-truth boxes")]
    CountMismatch { frames: usize, boxes: usize },
    #[error("prediction/ground-truth length mismatch: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("invalid synthetic sequence: {0}")]
    Synth(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] gdt_core::image::ImageError),
    #[error(transparent)]
    Tracker(#[from] gdt_core::TrackerError),
    #[error(transparent)]
    Network(#[from] gdt_core::nn::NnError),
}

impl BenchError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
