//! Client-side carrier-grade NAT detection.

pub mod pathchar;
pub mod probing;
pub mod types;
pub mod interchange;
pub mod par;
pub mod simulator;
pub mod classifier;
pub mod aggregator;
