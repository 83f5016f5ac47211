//! Data generation, training, checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod models;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationPlan, AblationReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use models::{Architecture, Models};
pub use train::{train_stage1, train_stage2, train_stage3, StageOutcome, Trainer};
