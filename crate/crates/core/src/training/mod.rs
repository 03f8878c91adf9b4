//! Curriculum, optimizer, data ingestion, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use config::{LrSchedule, TrainConfig};
pub use dataset::{ingest_dataset, load_image, save_png, Dataset};
pub use optim::{Adam, AdamConfig};
pub use sampler::TokenSampler;
pub use trainer::{run_training, train, train_step, StepOptions, StepRecord, Trainer};
