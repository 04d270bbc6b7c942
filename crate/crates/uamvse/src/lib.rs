//! Uncertainty-aware multi-view visual semantic embedding (UAMVSE) for
//! cross-modal retrieval, operating on precomputed or synthetic features.
//!
//! The pipeline: a dual-branch encoder maps image region features to K view
//! embeddings and caption token features to one text embedding ([`model`]);
//! per-view cosine similarity tensors feed an uncertainty-weighted objective
//! where each view-text loss is scaled by the inverse softmax of its
//! negative-pair similarity spread ([`loss`]); training runs hand-derived
//! reverse-mode gradients under Adam with finite-difference verification
//! ([`training`]); at inference the per-view scores are averaged and the
//! similarity matrix optionally softmax-normalized along rows/columns to
//! suppress hub candidates ([`inference`]); retrieval quality is measured
//! with Recall@K / RSUM ([`eval`]).
//!
//! Everything is deterministic given explicit seeds and runs in 64-bit
//! floats on a single core.

#![forbid(unsafe_code)]

use std::fmt;

pub mod data;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An operation received an empty input it cannot define a result for.
    EmptyInput { op: &'static str },
    /// An argument violated a precondition (bad temperature, batch size, ...).
    InvalidArg { op: &'static str, msg: String },
    /// A row with zero L2 norm where a direction is required.
    ZeroNormRow {
        op: &'static str,
        side: &'static str,
        row: usize,
    },
    /// An index outside the valid range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A malformed binary file; `offset` is the byte position of the problem.
    Format {
        path: String,
        offset: u64,
        msg: String,
    },
    /// Underlying I/O failure.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Malformed JSON (manifest, config, report).
    Parse { path: String, msg: String },
    /// A dataset invariant does not hold (dangling caption, overlapping splits, ...).
    DataInvariant { msg: String },
    /// A numeric failure: non-finite value where a finite one is required.
    Numeric { msg: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::EmptyInput { op } => write!(f, "{op}: empty input"),
            Error::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
            Error::ZeroNormRow { op, side, row } => {
                write!(f, "{op}: zero-norm row {row} in {side}")
            }
            Error::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            Error::Format { path, offset, msg } => {
                write!(f, "{path}: {msg} at byte offset {offset}")
            }
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::Parse { path, msg } => write!(f, "{path}: {msg}"),
            Error::DataInvariant { msg } => write!(f, "dataset invariant violated: {msg}"),
            Error::Numeric { msg } => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
