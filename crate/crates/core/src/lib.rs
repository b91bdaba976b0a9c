//! CrossGait: cross-modality gait recognition between LiDAR depth maps and
//! camera silhouettes.
//!
//! The crate is organized around a small differentiable tensor core
//! ([`graph`], [`optim`], [`gradcheck`]), a deterministic generator of paired
//! synthetic gait data ([`synthgen`]), preprocessing into aligned 64x64
//! network inputs ([`preprocess`]), the two-stream recognition network with
//! prototype attention and a shared feature adapter ([`model`]), the training
//! objectives ([`losses`]), the optimization loop with checkpointing
//! ([`trainer`], [`checkpoint`]), and retrieval-protocol evaluation
//! ([`evaluator`]).

use std::fmt;
use std::io;

pub mod checkpoint;
pub mod config;
pub mod evaluator;
pub mod formats;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod seeds;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

/// Errors produced anywhere in the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch; names both offending shapes.
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid configuration (bad key, bad value, inconsistent sizes).
    Config(String),
    /// A stated operation precondition was violated.
    Contract(String),
    /// Degenerate frame (too few foreground pixels to normalize).
    DegenerateFrame { pixels: usize, min: usize },
    /// Sequence rejected (fewer than two valid frames after dropping).
    SequenceRejected(String),
    /// Binary file is malformed; `offset` is the failing byte position.
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },
    /// Protocol construction failed (empty role, missing identity, ...).
    Protocol(String),
    /// I/O error with the path that produced it.
    Io { path: String, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} vs {rhs:?}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateFrame { pixels, min } => {
                write!(f, "degenerate frame: {pixels} foreground pixels (< {min})")
            }
            Error::SequenceRejected(msg) => write!(f, "sequence rejected: {msg}"),
            Error::Format {
                what,
                offset,
                detail,
            } => write!(f, "malformed {what} at byte {offset}: {detail}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
