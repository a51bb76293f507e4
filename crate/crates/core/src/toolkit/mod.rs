//! Datasets, experiment configuration, checkpoints, experiment recipes and
//! run manifests.

mod checkpoint;
mod config;
mod datasets;
mod experiments;
mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Method, SCHEMA_VERSION};
pub use datasets::{generate_dataset, DatasetSpec, LabeledDataset, Split};
pub use experiments::{
    compare, default_variants, evaluate_ensemble, finite_mean, member_seed, read_rows, spearman,
    surrogate_seed, sweep_clip, train_surrogate, train_variant, write_rows, CompareRow, EnsembleEval,
    PreparedData, SweepRow, Variant, COMPARE_COLUMNS, SWEEP_COLUMNS,
};
pub use manifest::{Manifest, MANIFEST_FILE, MANIFEST_VERSION};
