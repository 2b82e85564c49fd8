pub mod encoder;
pub mod error;
pub mod event;
pub mod experiments;
pub mod graph;
pub mod head;
pub mod numerics;
pub mod synth;
pub mod training;
mod snapshot;

pub use error::{Error, Result};
