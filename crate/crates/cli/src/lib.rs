//! Command-line surface for LTCF-Net: run configuration, the train,
//! enhance, eval and inspect commands, tiled inference and reports.

pub mod commands;
pub mod config;
pub mod report;
pub mod tiling;

pub use commands::{exit_code, EnhanceArgs, EnhanceSummary, TrainOutcome};
pub use config::{Overrides, RunConfig};
pub use report::{EvalReport, ImageScore};
