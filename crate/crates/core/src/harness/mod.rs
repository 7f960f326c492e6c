//! Configuration-driven experiments: data sources, the small SGD trainer,
//! the experiment grid and report emission.

mod checks;
mod config;
mod data;
mod pool;
mod report;
mod run;
mod train;

pub use checks::{identity_checks, IdentityReport};
pub use config::{DataSource, ExperimentConfig, ExperimentKind};
pub use data::{
    cifar_pixels, cifar_to_dataset, load_cifar100, parse_cifar100, serialize_cifar100,
    synthetic_blobs, synthetic_gaussian, CifarRecord, Dataset, GaussianBatches, CIFAR_RECORD,
};
pub use pool::par_map;
pub use report::{
    emit, from_json, to_csv, to_json, Divergence, Format, ReportBundle, CSV_COLUMNS, SCHEMA_VERSION,
};
pub use run::{averaged_trace, centered_penultimate, pooled_grad_traces, run, train_run, TrainRun};
pub use train::{train_sgd, TrainHyper, TrainOutcome};
