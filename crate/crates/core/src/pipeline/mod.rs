//! Three-stage training: full fine-tune, per-domain experts, gates only.

pub mod optim;
pub mod stages;

pub use optim::{optimizer_step, OptimHyper, OptimizerKind, Parameters, TrainState};
pub use stages::{
    assemble_mole, attach_fresh_experts, eval_batch, eval_loss, stage1_checkpoint, stage1_finetune,
    stage2_train_expert, stage3_checkpoint, stage3_train_gating, train_attached_expert,
    DatasetSelector, ExpertSet, Stage, StageConfig, PAPER_PRESETS,
};
