//! Data loading, training, checkpoints, inference and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod image_io;
pub mod infer;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, Progress};
pub use config::{Ablation, RunConfig};
pub use data::{crop_sampler, load_dir, load_pair, synthetic_pairs, ImagePair};
pub use infer::{evaluate, fuse_pair, fuse_tensors, FuseMode};
pub use optim::Adam;
pub use train::{run_training, train, write_loss_log, LossRecord, TrainReport};
