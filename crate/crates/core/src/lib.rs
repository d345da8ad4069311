//! Desk-scale simulator of gradient-based training on non-ideal analog
//! in-memory-computing (AIMC) crossbar hardware.
//!
//! Weights live on bounded, limited-state crossbar tiles and are mutated only
//! through stochastic pulse coincidences with state-dependent asymmetric
//! response. On top of that device model the crate provides Analog SGD,
//! Tiki-Taka v1/v2, Mixed Precision, and multi-timescale multi-tile residual
//! learning, together with toy problems, a small analog MLP, an analytical
//! hardware cost model, and an experiment harness with a CLI.

pub mod algorithms;
pub mod composite;
pub mod costmodel;
pub mod device;
pub mod harness;
pub mod problems;
pub mod pulse;
pub mod tile;

pub use device::{DeviceError, DeviceKind, DeviceModel};
pub use tile::{Tile, TileInit};
