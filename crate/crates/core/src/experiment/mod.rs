//! Config-driven runs, result tables and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod record;
pub mod report;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;
pub use record::{RunRecord, TaskResult};
pub use report::{emit_table, Format, TableReport, TableRow};
pub use runner::{run_ablation, run_experiment, run_pilot, AblationKind, RunOutput};
