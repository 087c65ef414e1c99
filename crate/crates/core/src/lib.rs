//! Unpaired captioning through scene-graph feature alignment.
//!
//! Sentences are parsed into scene graphs, a graph-convolutional encoder and
//! an attention LSTM decoder learn to reconstruct sentences from their
//! graphs, and a cycle-consistent adversarial mapper carries image-side
//! graph features into the sentence feature space so the same decoder can
//! caption them.

pub mod align;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parser;
pub mod pipeline;
pub mod scenegraph;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
