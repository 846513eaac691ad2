//! Federated learning of Kalman gains for GNSS position filtering.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod federation;
pub mod filter;
pub mod learned;
pub mod network;
pub mod seeds;
pub mod selfcheck;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
