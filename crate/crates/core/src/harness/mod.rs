//! Experiment plumbing: datasets, config files, orchestration and reports.

pub mod blobs;
pub mod config;
pub mod experiment;
pub mod mnist;
pub mod report;

pub use blobs::{make_blobs, nearest_centroid_accuracy, BlobParams};
pub use config::{DatasetKind, ExperimentConfig};
pub use experiment::{load_dataset, partition_experiment, run_experiment, score_experiment, ExperimentOutput};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels};
pub use report::{read_metrics, rounds_to_target, summarize, MetricsRow, StrategySummary};
