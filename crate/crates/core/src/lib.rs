//! Temporal sequences as grid-layout images: frames are packed into one
//! image, a conditional velocity model is trained with parallel flow matching
//! plus a directional temporal loss, and a masked, noise-injected sampler
//! performs generation, expansion, interpolation, and restoration.

pub mod backbone;
pub mod cli;
pub mod condition;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod flow;
pub mod io;
pub mod layout;
pub mod metrics;
pub mod sampler;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use layout::{pack, unpack, Frame, GridSize, GridTensor, LayoutSpec};
