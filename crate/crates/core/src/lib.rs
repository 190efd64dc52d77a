//! Adversarial domain adaptation for extractive reading comprehension.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod corpus;
pub mod encoder;
pub mod mrc_head;
pub mod discriminator;
pub mod eval_metrics;
pub mod model;
pub mod trainer;
pub mod analysis;
