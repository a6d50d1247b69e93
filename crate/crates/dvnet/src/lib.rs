//! Desk-scale neurovascular reconstruction toolkit.
//!
//! A densely connected 3D (and 2D) encoder-decoder for semantic segmentation,
//! built on a minimal reverse-mode tensor engine, plus the post-processing
//! stages that turn class masks into explicit structure: radial-voting cell
//! localization and predictor-corrector vessel tracing. Large volumes run
//! through overlapped tiling with seam-free core stitching.

pub mod arch;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Shape, Tensor};
