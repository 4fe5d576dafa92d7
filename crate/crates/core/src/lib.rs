//! Deterministic-equivalent analysis and phase optimization for multi-RIS MIMO multiple-access channels.
//!
//! All mutual informations are in nats; `C` is normalized per transmit antenna so the
//! ergodic sum MI is `Nt·C`.

pub mod channel;
pub mod cli;
pub mod config;
pub mod correlation;
pub mod deteq;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod optimize;
pub mod phases;
pub mod region;
pub mod variance;
pub mod waterfill;

pub use error::{Error, Result};
