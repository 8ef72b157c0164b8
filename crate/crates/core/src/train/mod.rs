//! Optimizers, schedule, augmentation, datasets and the training loop.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use data::{load_dataset, Dataset, DatasetHandle, DatasetSource, Split};
pub use optim::{OptimizerConfig, Optimizer};
pub use schedule::cosine_lr;
pub use trainer::{evaluate, train, RunStatus, RunSummary, TrainConfig, TrainOutcome};
