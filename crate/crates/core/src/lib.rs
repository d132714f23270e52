//! Cross-domain satellite image-text retrieval.
//!
//! The crate covers the full pipeline at desk scale: segment filtering and
//! weighted aggregation, dual-encoder contrastive pretraining, curriculum
//! source sampling, weighted adversarial fine-tuning, retrieval metrics and
//! geo-tag analytics, plus a synthetic two-domain corpus generator.

pub mod acss;
pub mod adversary;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geotag;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod segment_filter;
pub mod tape;

pub use error::{Error, Result};
