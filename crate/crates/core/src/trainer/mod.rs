//! Optimization: schedules, task sampling, AdamW, checkpoints and training loops.

pub mod checkpoint;
mod config;
mod optim;
mod run;
mod sampler;
mod schedule;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, quantize_f32, save_checkpoint, CheckpointKind,
    CheckpointMeta,
};
pub use config::{EvalConfig, NoisePolicy, PretrainConfig, RunConfig, StageConfig, DEFAULT_SNR_SWEEP};
pub use optim::{AdamW, AdamWConfig};
pub use run::{
    curves_csv, lm_perplexity, next_token_accuracy, pretrain_lm, run_stage, select_final, spec_for, train_step,
    CurvePoint, SelectionMetrics, Snapshot, StageOutcome, TrainContext,
};
pub use sampler::{sample_task, DropoutSchedule, TaskMix};
pub use schedule::TriStage;
