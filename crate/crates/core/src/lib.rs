//! Shared-encoder multi-task learning for text tasks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
