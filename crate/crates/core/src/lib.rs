//! Multi-scenario recommendation foundation model with hybrid target attention.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod heads;
pub mod hta;
pub mod inference;
pub mod mask;
pub mod model;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

pub type ScenarioId = u32;
pub type UserId = u64;
pub type Timestamp = u64;
