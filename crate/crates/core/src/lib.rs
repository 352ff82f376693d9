//! Coarse-to-fine self-attentive sequential recommendation.
//!
//! Two causal self-attention encoders read a user's intent sequence and item
//! sequence; the item encoder adds a learned local-attention bias, the two
//! representations are summed, and candidates are ranked by the product of
//! intent and item probabilities.

pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod kv;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
