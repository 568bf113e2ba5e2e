//! Gasformer: a hierarchical transformer encoder with an NMF-based Light-Ham
//! decoder for gas-plume segmentation in optical gas imaging frames, plus the
//! semi-automated mask labeling pipeline used to build training data.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod network;
pub mod nmf;
pub mod nn;
pub mod checkpoint;
pub mod dataset;
pub mod labeler;
pub mod training;
pub mod tensor;

pub use decoder::{DecoderConfig, NmfMode, StageSet};
pub use encoder::{EncoderConfig, StageConfig};
pub use error::{Error, Result};
pub use network::{Model, ModelConfig};
pub use tensor::{Element, Tape, Tensor, Var};
