//! Model assembly, training loops and checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FILE, CHECKPOINT_VERSION, PARAMS_FILE};
pub use config::{AblateConfig, DataSource, RunConfig, SweepConfig, TrainConfig};
pub use model::{
    bind_inputs, predict_prepared, prepare, Architecture, ForwardOut, FusionKind, FusionModule, ModelBundle,
    ModelConfig, Prepared, Role,
};
pub use optim::{Adam, AdamConfig, EarlyStopping, Verdict};
pub use train::{common_length, predict, train_student, train_teacher, EpochRecord, TrainOutcome};
