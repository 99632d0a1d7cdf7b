//! Reciprocal sequential recommendation: two-sided transformer matching with
//! macro/micro scoring, micro-to-macro self-distillation, leakage-safe
//! dual-perspective evaluation and a matching latency benchmark.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
