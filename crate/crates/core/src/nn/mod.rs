//! Toy networks split into a feature extractor and a task head, their
//! training loop and checkpoint persistence.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{
    read_container, write_container, Dtype, ModelCheckpoint, StoredArray, TrainMetadata, MAGIC,
    VERSION,
};
pub use model::{
    build_model, forward, predict, split_forward, task_loss, Layer, Model, ModelDescriptor,
    Network, Task,
};
pub use train::{train, AdversarialTraining, LrSchedule, Optimizer, TrainConfig};
