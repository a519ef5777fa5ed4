//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DartError {
    #[error("non-finite value {value} at cell ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("degenerate rect [{x0}, {x1}] x [{y0}, {y1}]")]
    DegenerateRect { x0: f64, x1: f64, y0: f64, y1: f64 },

    #[error("stitching requires regular grid")]
    IrregularStitch,

    /// Pipeline stages wrap inner errors so failures name the stage.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DartError>,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad {what}: {why}")]
    Format { what: String, why: String },
}

impl DartError {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        DartError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        DartError::Invalid {
            what,
            why: why.into(),
        }
    }

    pub fn format(what: impl Into<String>, why: impl Into<String>) -> Self {
        DartError::Format {
            what: what.into(),
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DartError>;
