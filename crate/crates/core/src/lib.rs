//! Sequential recommendation with long- and short-term sparse attention.
//!
//! A transformer encoder whose attention layers fuse two sparse pathways
//! through a learned gate: a block-compression pathway that selects the most
//! relevant past blocks per query, and a power-law mask over recent and
//! exponentially spaced positions.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod data;
pub mod embedding;
mod error;
pub mod fusion;
pub mod ltis;
pub mod metrics;
pub mod numeric;
pub mod recommender;
pub mod run;
pub mod stis;
pub mod verify;

pub use config::AttentionConfig;
pub use error::{Error, Result};
