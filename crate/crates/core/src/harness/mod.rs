//! Experiment plumbing: datasets, configuration, checkpoints, reports, the
//! end-to-end pipeline and the verification suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod report;
pub mod verify;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{EvalConfig, RunConfig};
pub use data::{gen_blobs, load_dataset, save_dataset, BlobConfig, BlobSets};
pub use report::MetricsReport;
