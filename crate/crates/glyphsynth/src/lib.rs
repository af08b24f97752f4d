//! Few-shot glyph synthesis with chunked image tokenization and a
//! two-stage (parallel then serial) transformer pipeline.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pbm;
pub mod tensor;
pub mod toyfont;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
