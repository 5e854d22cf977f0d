//! Teacher/student multi-view anomaly detection.
//!
//! A frozen CNN teacher yields a three-stage feature pyramid. Each stage is
//! enhanced by chained MVAS blocks (views of one sample only), the stages are
//! fused into a bottleneck and a student decoder reconstructs the pyramid.
//! Training minimizes the per-stage squared error; at test time the per-pixel
//! cosine distance between the two pyramids is the anomaly map.

mod checkpoint;
mod config;
mod evaluate;
mod model;
mod scoring;
mod train;

pub use checkpoint::{load_checkpoint, load_teacher_weights, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_MANIFEST};
pub use config::{EvalConfig, ModelConfig, RunConfig, StageConfig, TrainConfig, Wiring};
pub use evaluate::{
    build_report, check_compatible, evaluate, evaluate_with, reconstruct, sample_maps, Evaluation, MetricReport,
    ReportMetadata,
};
pub use model::{
    decoder_forward, distillation_loss, enhance_stage, fpn_fuse, student_forward, Conv, Fpn, MvadModel, Pyramid,
    Student, Teacher, BLOCK_FIELDS,
};
pub use scoring::{aggregate_scores, anomaly_maps, gaussian_smooth, ScoreSet};
pub use train::{loss_and_grads, stack_images, train, FeatureBank, LossGrads, StepInfo, TrainReport};
pub use crate::synthdata::MultiViewBatch;
