//! Data ingestion, SGD training, evaluation and checkpoint persistence.

pub mod checkpoint;
pub mod data;
pub mod train;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest};
pub use data::{load_cifar10, load_cifar100, synth_dataset, Dataset, Split, Standardization};
pub use train::{evaluate, predict, train, EvalRecord, EvalResult, LogRecord, Sgd, TrainLog, TrainOptions, TrainSchedule};
