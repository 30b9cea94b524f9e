//! Adversarial mosaic stylization with a tiled-template memory.
//!
//! A single U-Net reads a content patch and the global template coordinates
//! of that patch, and predicts three heads: per-pixel mixture logits over N
//! memory templates, a blend mask and a parametric image. The memory image
//! is a softmax-weighted combination of the templates at each pixel; the
//! output blends it with the parametric image. Training is adversarial
//! against a patch discriminator plus a content reconstruction term, and
//! inference rolls the fully-convolutional generator over large images in
//! overlapping chunks.

pub mod adversary;
pub mod bench;
pub mod config;
pub mod error;
pub mod generator;
pub mod image_ops;
pub mod inference;
pub mod nn;
pub mod substrate;
pub mod template_memory;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use substrate::{Adam, ParamStore, RngState, Tape, Var};
pub use tensor::{Shape, Tensor};
