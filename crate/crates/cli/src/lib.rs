//! Configuration and orchestration behind the `introspect` binary.

pub mod config;
pub mod pipeline;

pub use config::Config;
pub use pipeline::Pipeline;

/// The small configuration used when `--config` is not given.
pub const SMOKE_CONFIG: &str = include_str!("../configs/smoke.json");
