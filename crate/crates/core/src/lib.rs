//! Touch authentication from capacitive frames and device motion.

pub mod augment;
pub mod capsense;
pub mod embed;
pub mod motion;
pub mod session;
pub mod stats;
pub mod metrics;
pub mod oneclass;
pub mod synth;
pub mod pipeline;
pub mod config;
pub mod dataset;
pub mod workflow;
pub mod benchmark;
