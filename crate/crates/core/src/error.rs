// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports.
///
/// Variants fall into three families that map onto stable process exit
/// codes (see [`Error::exit_code`]): validation of inputs, refusal on
/// degenerate mathematics, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unsupported format version {found:?}, expected {expected:?}")]
    FormatVersion { found: String, expected: &'static str },

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("fiedler value is not simple: spectral gap {gap:.3e} is below tolerance {tolerance:.1e}")]
    DegenerateFiedler { gap: f64, tolerance: f64 },
}

impl Error {
    /// Process exit code: 2 validation, 3 degenerate-math refusal, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::Degenerate(_) | Error::DegenerateFiedler { .. } => 3,
            Error::Manifest(_)
            | Error::FormatVersion { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidInput(_)
            | Error::Validation(_) => 2,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest(_) => "manifest",
            Error::FormatVersion { .. } => "format_version",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::Validation(_) => "validation",
            Error::Degenerate(_) => "degenerate",
            Error::DegenerateFiedler { .. } => "degenerate_fiedler",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
