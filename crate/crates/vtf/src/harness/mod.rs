//! Run orchestration: TOML configs, the Adam optimizer with loss scaling,
//! checkpoints with exact resume, the GAN and diffusion trainers, split
//! evaluation, and the loss-term ablation driver.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod eval;
pub mod gan;
pub mod optim;

pub use ablate::{run_ablation, AblationArm, AblationReport};
pub use checkpoint::{restore_params, step_dir, CheckpointMeta};
pub use config::{Ablation, TrainConfig, Variant};
pub use diff::{DiffStepRecord, DiffusionTrainer};
pub use eval::{
    evaluate, translator_from_checkpoint, DiffusionTranslator, GanTranslator, IdentityTranslator,
    NoiseTranslator, Translator,
};
pub use gan::{GanTrainer, StepRecord};
pub use optim::{Adam, AdamState, LossScaler};
