use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

/// Which axis of a `(N, C, H, W)` tensor an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Batch,
    Channels,
    Height,
    Width,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dim::Batch => "batch",
            Dim::Channels => "channels",
            Dim::Height => "height",
            Dim::Width => "width",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A dimension did not have the value an operation required.
    ShapeMismatch {
        op: &'static str,
        dim: Dim,
        expected: usize,
        found: usize,
    },
    /// Output spatial size of a convolution would be < 1.
    DegenerateOutput {
        op: &'static str,
        height: i64,
        width: i64,
    },
    /// Spatial size must be even (2x average pooling) or divisible by some factor.
    Indivisible {
        op: &'static str,
        dim: Dim,
        size: usize,
        divisor: usize,
    },
    /// Operation expects a matrix stored as `(1, 1, rows, cols)`.
    NotAMatrix { op: &'static str, shape: Shape },
    /// Matrix product with disagreeing inner dimensions.
    InnerDimMismatch { left: usize, right: usize },
    /// `backward` requires a `(1, 1, 1, 1)` root.
    NonScalarRoot(Shape),
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, found: usize },
    /// A zero-sized dimension.
    EmptyDim(Dim),
    /// A feature pyramid level violated the doubling geometry.
    Pyramid {
        level: usize,
        dim: Dim,
        expected: usize,
        found: usize,
    },
    /// Box with `max <= min` on some axis.
    DegenerateBox,
    /// Average precision needs at least one ground-truth box.
    EmptyGroundTruth,
    /// Iteration outside `[0, total_iters]`.
    IterOutOfRange { iter: usize, total: usize },
    /// Any other violated configuration constraint.
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                dim,
                expected,
                found,
            } => write!(
                f,
                "{op}: {dim} mismatch (expected {expected}, found {found})"
            ),
            Error::DegenerateOutput { op, height, width } => {
                write!(f, "{op}: degenerate output size {height}x{width}")
            }
            Error::Indivisible {
                op,
                dim,
                size,
                divisor,
            } => write!(f, "{op}: {dim} {size} is not divisible by {divisor}"),
            Error::NotAMatrix { op, shape } => {
                write!(f, "{op}: expected a (1, 1, rows, cols) matrix, got {shape}")
            }
            Error::InnerDimMismatch { left, right } => {
                write!(f, "matmul: inner dimensions disagree ({left} vs {right})")
            }
            Error::NonScalarRoot(shape) => write!(f, "backward: root must be scalar, got {shape}"),
            Error::DataLength { expected, found } => {
                write!(
                    f,
                    "tensor data length {found} does not match shape volume {expected}"
                )
            }
            Error::EmptyDim(dim) => write!(f, "tensor {dim} must be >= 1"),
            Error::Pyramid {
                level,
                dim,
                expected,
                found,
            } => write!(
                f,
                "pyramid level {level}: {dim} expected {expected}, found {found}"
            ),
            Error::DegenerateBox => f.write_str("box must satisfy x_max > x_min and y_max > y_min"),
            Error::EmptyGroundTruth => {
                f.write_str("average precision needs at least one ground-truth box")
            }
            Error::IterOutOfRange { iter, total } => {
                write!(f, "iteration {iter} outside [0, {total}]")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
