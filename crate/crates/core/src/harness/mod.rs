//! Synthetic data, run manifests, the training loop and the experiments
//! driven by the command-line tool.

mod dataset;
mod experiments;
mod manifest;
mod train;

pub use dataset::{DataKind, SyntheticDataset};
pub use experiments::*;
pub use manifest::RunManifest;
pub use train::{
    hidden_path, metrics_header, streams, train, u_sigmas, validation_loss, MetricsTable, Run, TrainOptions,
    TrainOutcome, FINAL_FILE, MANIFEST_FILE, METRICS_FILE, PROBE_BATCH, SIGMA_FILE, STORE_DIR, U_SAMPLES,
};
