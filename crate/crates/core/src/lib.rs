//! Point-cloud serialization with space-filling curves, serialized patch
//! attention and the surrounding U-Net machinery, plus locality metrics and
//! a small benchmarking harness.
//!
//! The pipeline is: [`serialize`] a cloud into one or more curve orders,
//! group each order into padded patches ([`patch`]), run attention inside
//! patches ([`attn`]), and stack blocks into an encoder/decoder with grid
//! pooling ([`network`]). [`metrics`] measures how well the orders preserve
//! spatial neighborhoods and how the pieces scale.

pub mod attn;
pub mod cli;
pub mod error;
pub mod formats;
pub mod gen;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod rng;
pub mod serialize;
pub mod sfc;
pub mod tensor;

pub use error::{Error, Result};
