//! Per-layer rank search for low-rank adapters.

pub mod bilevel;
pub mod error;
pub mod harness;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod persistio;
pub mod pipeline;
pub mod rankselect;
pub mod train;

pub use error::{Error, Result};
