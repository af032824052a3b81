//! Contrastive self-supervised pretraining for tabular data.
//!
//! An FT-Transformer with mask token replacement, NTXent and CLIP objectives,
//! a two-arm late-fusion model, and the harness around them: splits,
//! preprocessing, missingness synthesis, metrics and experiment runners.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod data;
pub mod objectives;
pub mod model;
pub mod training;
pub mod metrics;
pub mod experiment;
