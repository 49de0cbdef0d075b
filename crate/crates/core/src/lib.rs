//! Token-granular KV caching for autoregressive transformer inference.
//!
//! Sparse window attention picks which cached tokens take part in each decode
//! step, a two-tier memory simulator tracks where every `(layer, token)` KV
//! entry lives, and an offline scheduler decides when to cache on the device,
//! offload to the host, or delete and recompute.

pub mod analyze;
pub mod attention;
pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod math;
pub mod memsim;
pub mod par;
pub mod quant;
pub mod scheduler;
pub mod sweep;

pub use config::RunConfig;
pub use error::{Error, Result};
