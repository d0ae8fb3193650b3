//! Self-supervised pretraining of a Vision Transformer encoder with VICReg
//! losses plus a temporal order verification task, linear probing of the
//! learned representations, and collapse diagnostics.

pub mod diffcore;
mod error;

pub use error::{Error, Result};
pub mod vit;
mod resample;
pub mod augment;
pub mod data;
pub mod export;
pub mod metrics;
pub mod probe;
pub mod ssl;
