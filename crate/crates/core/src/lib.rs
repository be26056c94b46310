//! Guided mask propagation for video object segmentation.
//!
//! A per-frame refiner maps an image plus a coarse guidance mask to a
//! foreground score map. Propagation feeds each frame's dilated estimate in
//! as guidance for the next frame. Around that loop the crate provides the
//! training-mask synthesis recipe, flow-magnitude fusion, a fully connected
//! spatio-temporal CRF and the evaluation protocol.

pub mod crf;
pub mod error;
pub mod eval;
pub mod flow;
pub mod manifest;
pub mod model;
pub mod morphology;
pub mod pipeline;
pub mod propagation;
pub mod refiner;
pub mod synth;
pub mod synthetic;
pub mod tps;

pub use error::{Error, Result};
pub use model::{
    mask_from_box, threshold, Annotation, AnnotationKind, BinaryMask, BoundingBox, EvalProtocol, Image, ScoreMap,
    VideoSequence,
};
