use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("dimension mismatch: {context}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        context: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("score {value} at index {index} lies outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f32 },

    #[error("bounding box ({x_min},{y_min})-({x_max},{y_max}) is invalid for a {width}x{height} image")]
    BoxOutOfBounds {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
        width: u32,
        height: u32,
    },

    #[error("degenerate thin-plate-spline control points after {attempts} attempts")]
    DegenerateControlPoints { attempts: usize },

    #[error("sequence {sequence}: {message}")]
    Manifest { sequence: String, message: String },

    #[error("sequence {sequence}, frame {frame}: {message}")]
    Frame {
        sequence: String,
        frame: usize,
        message: String,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("flow file: {0}")]
    FlowFormat(String),

    #[error("refiner: {0}")]
    Refiner(String),

    #[error("wire protocol: {0}")]
    Protocol(String),

    #[error("remote backend error: {0}")]
    Remote(String),

    #[error("crf: {0}")]
    Crf(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("image codec error for {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach a sequence name and frame index to an error raised deeper in the stack.
    pub fn at_frame(self, sequence: &str, frame: usize) -> Error {
        match self {
            e @ Error::Frame { .. } => e,
            other => Error::Frame {
                sequence: sequence.to_string(),
                frame,
                message: other.to_string(),
            },
        }
    }
}
