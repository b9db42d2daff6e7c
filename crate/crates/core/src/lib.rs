pub mod array;
pub mod centroid;
pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod eval;
mod error;
pub mod manifest;
pub mod model;
pub mod scene;
pub mod trainer;
pub mod wav;

pub use error::{KwsError, Result};
