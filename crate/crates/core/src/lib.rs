//! Rehearsal-free continual learning with task-specific prompts over a frozen
//! transformer, plus numerical checks of the entropy decomposition behind it.

pub mod backbone;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod prompts;
pub mod statistics;
pub mod theory;

pub use error::{Error, Result};
