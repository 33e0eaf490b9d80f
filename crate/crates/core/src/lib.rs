//! Aesthetic-saliency-enhanced image captioning at desk scale.
//!
//! The pipeline: a small ViT [`scorer`] classifies an image into style
//! categories; [`iasm`] turns the gradient of the winning score at a chosen
//! layer into a spatial saliency map; the [`encoder`] runs saliency-queried
//! cross-attention over the original patch tokens; a toy [`captioner`]
//! decodes text from the projected visual tokens; [`metrics`] scores the
//! captions. [`experiment`] ties it together for the three-way ablation.

pub mod error;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub mod image_ops;
pub mod checkpoint;
pub mod scorer;
pub mod data;
pub mod text;
pub mod iasm;
pub mod encoder;
pub mod captioner;
pub mod metrics;
pub mod experiment;
