//! Semi-supervised continual learning with a two-tier replay pool.
//!
//! A small RAM pool holds a reservoir of labeled samples plus a refillable
//! block of pseudo-labeled samples; a large file-backed pool collects
//! confidently pseudo-labeled unlabeled data during training. Between tasks
//! the file pool is resampled, class by class, into the RAM pool.

pub mod config;
pub mod data;
pub mod disk_pool;
pub mod error;
pub mod learner;
pub mod memory_pool;
pub mod offline;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod types;

pub use config::{validate_config, Hyperparams};
pub use disk_pool::{AdmissionDecision, AdmissionGate, DiskPool};
pub use error::{Error, Result};
pub use learner::{Dims, Model};
pub use memory_pool::MemoryPool;
pub use schedule::ProgressiveSchedule;
pub use trainer::{run_stream, run_stream_with_model, RunReport, Trainer, Variant};
pub use types::{ClassId, LabeledSample, PseudoLabeledSample, Sample, Task, TaskStream};
