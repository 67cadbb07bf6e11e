//! Curricular contrastive object-level pre-training at desk scale.
//!
//! Unsupervised region proposals feed a momentum-encoder contrastive learner
//! with image-level, object-level and intra-image objectives, plus a
//! spatial-noise curriculum over key-branch boxes.

pub mod cli;
pub mod config;
pub mod curriculum;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod image;
pub mod network;
pub mod objectives;
pub mod proposals;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::BBox;
