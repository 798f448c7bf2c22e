//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by calibration primitives.
///
/// Variants carry enough context (byte offsets, pixel indices, iteration
/// counters) to diagnose a failure without re-running the operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed PNM/PFM input; `offset` is the byte where parsing failed.
    #[error("image parse error at byte {offset}: {reason}")]
    ImageParse { offset: usize, reason: String },

    /// Serialization rejected a non-finite or non-positive sample.
    #[error("bad depth value {value} at pixel index {index}")]
    BadDepthValue { index: usize, value: f64 },

    /// An operation needs larger dimensions than it was given.
    #[error("degenerate size: {0}")]
    DegenerateSize(String),

    /// Two grids that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A masked reduction was handed a mask with no valid pixels.
    #[error("empty validity mask")]
    EmptyMask,

    /// Twist rotation magnitude left the injective chart of the exponential.
    #[error("rotation magnitude {angle} rad is outside the exp chart (< pi required)")]
    OutOfChart { angle: f64 },

    /// A numeric precondition (positivity, ordering, finiteness) failed.
    #[error("domain error: {0}")]
    Domain(String),

    /// A rendered ray hit no scene geometry and no background was allowed.
    #[error("no scene coverage for pixel ({x}, {y})")]
    Coverage { x: usize, y: usize },

    /// A packed parameter vector does not match the problem layout.
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    /// Problem assembly rejected its inputs.
    #[error("problem construction: {0}")]
    ProblemConstruction(String),
}

pub type Result<T> = std::result::Result<T, Error>;
