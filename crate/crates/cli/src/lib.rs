//! Command-line orchestration for the difftext engine: configuration,
//! the render/generate/evaluate/attn-dump pipelines and a loopback server.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod pipeline;

pub use config::{Backend, Config, MaskMode};
pub use error::{CliError, Stage};
pub use pipeline::{run_attn_dump, run_batch, run_generate, run_render, GenerateOutput, Metadata};
