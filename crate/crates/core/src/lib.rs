//! Incremental few-shot classification with task-adaptive representations.

pub mod error;
pub mod networks;
pub mod data;
pub mod numerics;
pub mod tar;
pub mod train;
pub mod analysis;
pub mod cli;

pub use error::{Error, Result};
